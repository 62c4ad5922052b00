//! Efficient multi-scale attention.
//!
//! Channels are split into `G` groups of `c = C / G` channels. Each group is processed
//! independently by the same parameters (the groups are folded into the batch axis):
//!
//! 1. The 1×1 branch pools along each spatial direction, mixes the two pooled profiles with a
//!    1×1 convolution, gates the group input with their sigmoids along H and W, and applies
//!    per-channel group normalization, giving `g1`.
//! 2. The 3×3 branch convolves the group input, giving `g2`.
//! 3. Each branch's globally pooled channel descriptor, softmaxed over channels, weights the
//!    other branch's channels; the two resulting `H×W` maps are summed and squashed by a
//!    sigmoid into the spatial attention.
//! 4. The group input is multiplied by its attention map.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, GroupNorm, Module, ParamKind};
use crate::tensor::{PoolAxis, Scalar, Tensor};

pub const DEFAULT_GROUPS: usize = 8;

pub struct EmaParams<T: Scalar> {
    pub groups: usize,
    pub channels: usize,
    pub conv1x1: Conv2d<T>,
    pub conv3x3: Conv2d<T>,
    pub gn: GroupNorm<T>,
}

impl<T: Scalar> EmaParams<T> {
    pub fn new(channels: usize, groups: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidGroups { channels, groups });
        }
        let c = channels / groups;
        Ok(EmaParams {
            groups,
            channels,
            conv1x1: Conv2d::same(c, c, 1, true, rng),
            conv3x3: Conv2d::same(c, c, 3, true, rng),
            gn: GroupNorm::new(c, c),
        })
    }

    /// Channels per group.
    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(x)?.0)
    }

    /// Output together with the per-group attention maps, shaped `[N, G, H, W]`.
    pub fn forward_with_attention(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, ch, h, w) = match *x.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "ema",
                    format!("expected [N,C,H,W], got {:?}", x.shape()),
                ))
            }
        };
        if ch % self.groups != 0 {
            return Err(Error::InvalidGroups {
                channels: ch,
                groups: self.groups,
            });
        }
        if ch != self.channels {
            return Err(Error::shape(
                "ema",
                format!("block built for {} channels, input has {ch}", self.channels),
            ));
        }
        let g = self.groups;
        let c = ch / g;
        let b = n * g;
        let gx = x.reshape(&[b, c, h, w])?;

        // 1x1 branch
        let pool_h = gx.directional_avg_pool(PoolAxis::Horizontal)?;
        let pool_w = gx
            .directional_avg_pool(PoolAxis::Vertical)?
            .permute(&[0, 1, 3, 2])?;
        let mixed = self
            .conv1x1
            .forward(&Tensor::concat(&[pool_h, pool_w], 2)?)?;
        let gate_h = mixed.narrow(2, 0, h)?.sigmoid();
        let gate_w = mixed.narrow(2, h, w)?.permute(&[0, 1, 3, 2])?.sigmoid();
        let g1 = self.gn.forward(&gx.mul(&gate_h)?.mul(&gate_w)?)?;

        // 3x3 branch
        let g2 = self.conv3x3.forward(&gx)?;

        // cross-spatial aggregation
        let descriptor = |t: &Tensor<T>| -> Result<Tensor<T>> {
            t.global_avg_pool_2d()?.reshape(&[b, 1, c])?.softmax(2)
        };
        let m1 = descriptor(&g1)?.matmul(&g2.reshape(&[b, c, h * w])?)?;
        let m2 = descriptor(&g2)?.matmul(&g1.reshape(&[b, c, h * w])?)?;
        let attention = m1.add(&m2)?.sigmoid().reshape(&[b, 1, h, w])?;

        let out = gx.mul(&attention)?.reshape(&[n, ch, h, w])?;
        Ok((out, attention.reshape(&[n, g, h, w])?))
    }
}

impl<T: Scalar> Module<T> for EmaParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv1x1.visit(&join(prefix, "conv1x1"), f);
        self.conv3x3.visit(&join(prefix, "conv3x3"), f);
        self.gn.visit(&join(prefix, "gn"), f);
    }
}

pub fn ema_forward<T: Scalar>(x: &Tensor<T>, params: &EmaParams<T>) -> Result<Tensor<T>> {
    params.forward(x)
}
