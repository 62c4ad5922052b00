//! Centralized feature pyramid: a stem, the explicit visual center (a lightweight MLP in
//! parallel with a learnable visual center) on the deepest level, and top-down regulation
//! of the shallower levels by the center's output.

mod gcr;
mod lvc;
mod mlp;

use rand::RngCore;

pub use gcr::{gcr_regulate, GlobalRegulation};
pub use lvc::{lvc_encode, lvc_gate, Codebook, LearnableVisualCenter, DEFAULT_CODEWORDS};
pub use mlp::{lightweight_mlp, LightweightMlp, MlpConfig};

use crate::error::{Error, Result};
use crate::nn::{join, Activation, Conv2d, ConvBnAct, Module, ParamKind, Phase};
use crate::tensor::{Scalar, Tensor};

/// Channel width of the neck at full scale.
pub const FULL_WIDTH: usize = 256;

/// 7×7 convolution, batch normalization, activation; stride 1 so size is preserved.
pub struct Stem<T: Scalar> {
    pub block: ConvBnAct<T>,
}

impl<T: Scalar> Stem<T> {
    pub fn new(cin: usize, width: usize, act: Activation, rng: &mut dyn RngCore) -> Self {
        Stem {
            block: ConvBnAct::new(cin, width, 7, 1, act, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        self.block.forward(x, phase)
    }
}

impl<T: Scalar> Module<T> for Stem<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.block.visit(prefix, f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvcConfig {
    pub width: usize,
    pub stem_act: Activation,
    pub mlp: Option<MlpConfig>,
    /// Codeword count, or `None` to drop the visual-center branch.
    pub codewords: Option<usize>,
}

impl Default for EvcConfig {
    fn default() -> Self {
        EvcConfig {
            width: FULL_WIDTH,
            stem_act: Activation::Silu,
            mlp: Some(MlpConfig::default()),
            codewords: Some(DEFAULT_CODEWORDS),
        }
    }
}

/// Stem, then `Cat(MLP(x), LVC(x))` over channels, fused back to `width` by a 1×1 convolution.
pub struct ExplicitVisualCenter<T: Scalar> {
    pub stem: Stem<T>,
    pub mlp: Option<LightweightMlp<T>>,
    pub lvc: Option<LearnableVisualCenter<T>>,
    pub fuse: Conv2d<T>,
}

impl<T: Scalar> ExplicitVisualCenter<T> {
    pub fn new(cin: usize, cfg: EvcConfig, rng: &mut dyn RngCore) -> Result<Self> {
        if cfg.mlp.is_none() && cfg.codewords.is_none() {
            return Err(Error::Config(
                "visual center needs at least one branch".into(),
            ));
        }
        let w = cfg.width;
        let stem = Stem::new(cin, w, cfg.stem_act, rng);
        let mlp = cfg
            .mlp
            .map(|m| LightweightMlp::new(w, m, rng))
            .transpose()?;
        let lvc = cfg
            .codewords
            .map(|k| LearnableVisualCenter::new(w, k, rng))
            .transpose()?;
        let branches = mlp.is_some() as usize + lvc.is_some() as usize;
        Ok(ExplicitVisualCenter {
            stem,
            mlp,
            lvc,
            fuse: Conv2d::same(branches * w, w, 1, true, rng),
        })
    }

    /// Concatenated branch outputs before fusion.
    pub fn branches(&self, x: &Tensor<T>, phase: &mut Phase<'_>) -> Result<Tensor<T>> {
        let xin = self.stem.forward(x, phase)?;
        let mut parts = Vec::with_capacity(2);
        if let Some(mlp) = &self.mlp {
            parts.push(mlp.forward(&xin, phase)?);
        }
        if let Some(lvc) = &self.lvc {
            parts.push(lvc.forward(&xin, phase)?);
        }
        Tensor::concat(&parts, 1)
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &mut Phase<'_>) -> Result<Tensor<T>> {
        self.fuse.forward(&self.branches(x, phase)?)
    }
}

impl<T: Scalar> Module<T> for ExplicitVisualCenter<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        if let Some(m) = &mut self.mlp {
            m.visit(&join(prefix, "mlp"), f);
        }
        if let Some(l) = &mut self.lvc {
            l.visit(&join(prefix, "lvc"), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn full_width_stem_and_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::from_fn(&[1, 5, 3, 2], |i| (i as f32).sin());
        let stem = Stem::new(5, FULL_WIDTH, Activation::Silu, &mut rng);
        assert_eq!(
            stem.forward(&x, &Phase::eval()).unwrap().shape(),
            &[1, 256, 3, 2]
        );
        let evc = ExplicitVisualCenter::new(5, EvcConfig::default(), &mut rng).unwrap();
        let mut phase = Phase::eval();
        assert_eq!(
            evc.branches(&x, &mut phase).unwrap().shape(),
            &[1, 512, 3, 2]
        );
        assert_eq!(
            evc.forward(&x, &mut phase).unwrap().shape(),
            &[1, 256, 3, 2]
        );
    }

    #[test]
    fn single_branch_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::ones(&[2, 4, 2, 2]);
        for (mlp, k) in [(None, Some(4)), (Some(MlpConfig::default()), None)] {
            let cfg = EvcConfig {
                width: 8,
                mlp,
                codewords: k,
                ..EvcConfig::default()
            };
            let evc = ExplicitVisualCenter::new(4, cfg, &mut rng).unwrap();
            assert_eq!(
                evc.forward(&x, &mut Phase::eval()).unwrap().shape(),
                &[2, 8, 2, 2]
            );
        }
        let none = EvcConfig {
            mlp: None,
            codewords: None,
            ..EvcConfig::default()
        };
        assert!(ExplicitVisualCenter::<f32>::new(4, none, &mut rng).is_err());
    }
}
