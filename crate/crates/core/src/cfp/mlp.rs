use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{drop_path, join, Activation, Conv2d, GroupNorm, Module, ParamKind, Phase};
use crate::tensor::{Conv2dOptions, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    /// Channel-MLP expansion ratio.
    pub ratio: usize,
    /// Depthwise kernel, 1 or 3.
    pub dconv_kernel: usize,
    pub layer_scale_init: f64,
    pub drop_path: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            ratio: 4,
            dconv_kernel: 1,
            layer_scale_init: 1e-2,
            drop_path: 0.1,
        }
    }
}

/// Two residual sub-blocks: a depthwise convolution, then a per-position channel MLP,
/// each behind a single-group normalization and scaled by a learnable per-channel vector.
pub struct LightweightMlp<T: Scalar> {
    pub norm1: GroupNorm<T>,
    pub dconv: Conv2d<T>,
    pub scale1: Tensor<T>,
    pub norm2: GroupNorm<T>,
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    pub scale2: Tensor<T>,
    pub drop_path: f64,
}

impl<T: Scalar> LightweightMlp<T> {
    pub fn new(width: usize, cfg: MlpConfig, rng: &mut dyn RngCore) -> Result<Self> {
        if cfg.dconv_kernel != 1 && cfg.dconv_kernel != 3 {
            return Err(Error::Config(format!(
                "depthwise kernel must be 1 or 3, got {}",
                cfg.dconv_kernel
            )));
        }
        if cfg.ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        let k = cfg.dconv_kernel;
        let hidden = width * cfg.ratio;
        Ok(LightweightMlp {
            norm1: GroupNorm::new(1, width),
            dconv: Conv2d::new(
                width,
                width,
                k,
                Conv2dOptions::new(1, k / 2, width),
                true,
                rng,
            ),
            scale1: Tensor::full(&[width], T::lit(cfg.layer_scale_init)).requiring_grad(),
            norm2: GroupNorm::new(1, width),
            fc1: Conv2d::same(width, hidden, 1, true, rng),
            fc2: Conv2d::same(hidden, width, 1, true, rng),
            scale2: Tensor::full(&[width], T::lit(cfg.layer_scale_init)).requiring_grad(),
            drop_path: cfg.drop_path,
        })
    }

    fn scaled(t: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
        t.mul(&scale.reshape(&[1, scale.numel(), 1, 1])?)
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &mut Phase<'_>) -> Result<Tensor<T>> {
        let branch = Self::scaled(&self.dconv.forward(&self.norm1.forward(x)?)?, &self.scale1)?;
        let x = drop_path(&branch, self.drop_path, phase)?.add(x)?;
        let hidden = Activation::Silu.apply(&self.fc1.forward(&self.norm2.forward(&x)?)?);
        let branch = Self::scaled(&self.fc2.forward(&hidden)?, &self.scale2)?;
        drop_path(&branch, self.drop_path, phase)?.add(&x)
    }
}

impl<T: Scalar> Module<T> for LightweightMlp<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.dconv.visit(&join(prefix, "dconv"), f);
        f(
            &join(prefix, "scale1"),
            ParamKind::Trainable,
            &mut self.scale1,
        );
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        f(
            &join(prefix, "scale2"),
            ParamKind::Trainable,
            &mut self.scale2,
        );
    }
}

pub fn lightweight_mlp<T: Scalar>(
    x: &Tensor<T>,
    params: &LightweightMlp<T>,
    phase: &mut Phase<'_>,
) -> Result<Tensor<T>> {
    params.forward(x, phase)
}
