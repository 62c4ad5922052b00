use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Module, ParamKind};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{Scalar, Tensor};

/// 1×1 fusion convolutions for the two shallow levels (index 0 regulates f3, index 1 f4).
pub struct GlobalRegulation<T: Scalar> {
    pub fuse: [Conv2d<T>; 2],
}

impl<T: Scalar> GlobalRegulation<T> {
    /// `level_channels` are the channel counts of f3 and f4; the result has `width` channels.
    pub fn new(level_channels: [usize; 2], width: usize, rng: &mut dyn RngCore) -> Self {
        GlobalRegulation {
            fuse: level_channels.map(|c| Conv2d::same(c + width, width, 1, true, rng)),
        }
    }

    pub fn forward(
        &self,
        pyramid: &FeaturePyramid<T>,
        evc_out: &Tensor<T>,
    ) -> Result<FeaturePyramid<T>> {
        gcr_regulate(pyramid, evc_out, self)
    }
}

impl<T: Scalar> Module<T> for GlobalRegulation<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for (i, c) in self.fuse.iter_mut().enumerate() {
            c.visit(&join(prefix, &format!("fuse{}", i + 3)), f);
        }
    }
}

fn power_of_two_ratio(big: usize, small: usize) -> Option<usize> {
    (big.is_multiple_of(small) && (big / small).is_power_of_two()).then(|| big / small)
}

/// Upsamples `evc_out` to each shallow level, concatenates it after the level's channels and
/// fuses with a 1×1 convolution. The deepest output is `evc_out` itself.
pub fn gcr_regulate<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    evc_out: &Tensor<T>,
    params: &GlobalRegulation<T>,
) -> Result<FeaturePyramid<T>> {
    if evc_out.rank() != 4 {
        return Err(Error::InvalidPyramid(format!(
            "center features must be [N,C,H,W], got {:?}",
            evc_out.shape()
        )));
    }
    let (eh, ew) = (evc_out.dim(2), evc_out.dim(3));
    let mut out = Vec::with_capacity(3);
    for (level, conv) in [&pyramid.f3, &pyramid.f4].into_iter().zip(&params.fuse) {
        let (h, w) = (level.dim(2), level.dim(3));
        let scale = match (power_of_two_ratio(h, eh), power_of_two_ratio(w, ew)) {
            (Some(a), Some(b)) if a == b => a,
            _ => {
                return Err(Error::InvalidPyramid(format!(
                    "level {h}x{w} is not a power-of-two multiple of {eh}x{ew}"
                )))
            }
        };
        let up = evc_out.upsample_nearest(scale)?;
        out.push(conv.forward(&Tensor::concat(&[level.clone(), up], 1)?)?);
    }
    out.push(evc_out.clone());
    let [f3, f4, f5]: [Tensor<T>; 3] = out.try_into().expect("three levels");
    FeaturePyramid::new(f3, f4, f5)
}
