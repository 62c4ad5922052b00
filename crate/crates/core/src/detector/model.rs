use rand::RngCore;

use super::backbone::Backbone;
use super::head::{DecoupledHead, HeadOutput};
use crate::cfp::{EvcConfig, ExplicitVisualCenter, GlobalRegulation, MlpConfig, DEFAULT_CODEWORDS};
use crate::ema::{EmaParams, DEFAULT_GROUPS};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, Conv2d, Module, ParamKind, Phase};
use crate::pyramid::{FeaturePyramid, STRIDES};
use crate::tensor::{Scalar, Tensor};

/// Which of the attention and neck components are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub ema: bool,
    pub evc: bool,
    pub mlp: bool,
    pub lvc: bool,
    pub gcr: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        ema: true,
        evc: true,
        mlp: true,
        lvc: true,
        gcr: true,
    };

    pub const BASELINE: Ablation = Ablation {
        ema: false,
        evc: false,
        mlp: false,
        lvc: false,
        gcr: false,
    };

    /// The full model and the five single-component removals.
    pub fn variants() -> [(&'static str, Ablation); 6] {
        let f = Ablation::FULL;
        [
            ("full", f),
            ("no-ema", Ablation { ema: false, ..f }),
            ("no-evc", Ablation { evc: false, ..f }),
            ("no-mlp", Ablation { mlp: false, ..f }),
            ("no-lvc", Ablation { lvc: false, ..f }),
            ("no-gcr", Ablation { gcr: false, ..f }),
        ]
    }

    /// The visual center is built only when enabled and at least one of its branches is.
    pub fn has_center(&self) -> bool {
        self.evc && (self.mlp || self.lvc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub widths: [usize; 3],
    pub neck_width: usize,
    pub head_width: usize,
    pub reg_max: usize,
    pub ema_groups: usize,
    pub codewords: usize,
    pub mlp: MlpConfig,
    pub stem_act: Activation,
    pub sppf: bool,
    pub ablation: Ablation,
}

impl Default for DetectorConfig {
    /// Full-scale widths.
    fn default() -> Self {
        DetectorConfig {
            in_channels: 1,
            num_classes: 3,
            image_size: 640,
            widths: [64, 128, 256],
            neck_width: 256,
            head_width: 256,
            reg_max: 16,
            ema_groups: DEFAULT_GROUPS,
            codewords: DEFAULT_CODEWORDS,
            mlp: MlpConfig::default(),
            stem_act: Activation::Silu,
            sppf: false,
            ablation: Ablation::FULL,
        }
    }
}

impl DetectorConfig {
    /// Small widths for single-core training on 96×96 images.
    pub fn desk() -> Self {
        DetectorConfig {
            image_size: 96,
            widths: [16, 32, 64],
            neck_width: 64,
            head_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("neck_width", self.neck_width),
            ("head_width", self.head_width),
            ("reg_max", self.reg_max),
            ("ema_groups", self.ema_groups),
            ("codewords", self.codewords),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::InvalidInputSize {
                size: self.image_size,
                divisor: 32,
            });
        }
        if self.ablation.ema {
            for &w in &self.widths {
                if w % self.ema_groups != 0 {
                    return Err(Error::InvalidGroups {
                        channels: w,
                        groups: self.ema_groups,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Neck: visual center (or a 1×1 lateral) on the deepest level, then either global
/// regulation of the shallow levels or independent 1×1 laterals.
pub struct Neck<T: Scalar> {
    pub center: Option<ExplicitVisualCenter<T>>,
    pub deep_lateral: Option<Conv2d<T>>,
    pub gcr: Option<GlobalRegulation<T>>,
    pub laterals: Option<[Conv2d<T>; 2]>,
}

impl<T: Scalar> Neck<T> {
    fn new(cfg: &DetectorConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let a = cfg.ablation;
        let w = cfg.neck_width;
        let (center, deep_lateral) = if a.has_center() {
            let evc = EvcConfig {
                width: w,
                stem_act: cfg.stem_act,
                mlp: a.mlp.then_some(cfg.mlp),
                codewords: a.lvc.then_some(cfg.codewords),
            };
            (
                Some(ExplicitVisualCenter::new(cfg.widths[2], evc, rng)?),
                None,
            )
        } else {
            (None, Some(Conv2d::same(cfg.widths[2], w, 1, true, rng)))
        };
        let (gcr, laterals) = if a.gcr {
            (
                Some(GlobalRegulation::new(
                    [cfg.widths[0], cfg.widths[1]],
                    w,
                    rng,
                )),
                None,
            )
        } else {
            let l = [cfg.widths[0], cfg.widths[1]].map(|c| Conv2d::same(c, w, 1, true, rng));
            (None, Some(l))
        };
        Ok(Neck {
            center,
            deep_lateral,
            gcr,
            laterals,
        })
    }

    pub fn forward(
        &self,
        p: &FeaturePyramid<T>,
        phase: &mut Phase<'_>,
    ) -> Result<FeaturePyramid<T>> {
        let deep = match (&self.center, &self.deep_lateral) {
            (Some(c), _) => c.forward(&p.f5, phase)?,
            (None, Some(l)) => l.forward(&p.f5)?,
            (None, None) => unreachable!("neck always has a deep path"),
        };
        match (&self.gcr, &self.laterals) {
            (Some(g), _) => g.forward(p, &deep),
            (None, Some([l3, l4])) => {
                FeaturePyramid::new(l3.forward(&p.f3)?, l4.forward(&p.f4)?, deep)
            }
            (None, None) => unreachable!("neck always has shallow paths"),
        }
    }
}

impl<T: Scalar> Module<T> for Neck<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        if let Some(c) = &mut self.center {
            c.visit(&join(prefix, "evc"), f);
        }
        if let Some(l) = &mut self.deep_lateral {
            l.visit(&join(prefix, "lateral5"), f);
        }
        if let Some(g) = &mut self.gcr {
            g.visit(&join(prefix, "gcr"), f);
        }
        if let Some(ls) = &mut self.laterals {
            for (i, l) in ls.iter_mut().enumerate() {
                l.visit(&join(prefix, &format!("lateral{}", i + 3)), f);
            }
        }
    }
}

pub struct Detector<T: Scalar> {
    pub config: DetectorConfig,
    pub backbone: Backbone<T>,
    pub ema: Option<[EmaParams<T>; 3]>,
    pub neck: Neck<T>,
    pub heads: [DecoupledHead<T>; 3],
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: DetectorConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.in_channels, config.widths, config.sppf, rng);
        let ema = if config.ablation.ema {
            let [a, b, c] = config.widths;
            Some([
                EmaParams::new(a, config.ema_groups, rng)?,
                EmaParams::new(b, config.ema_groups, rng)?,
                EmaParams::new(c, config.ema_groups, rng)?,
            ])
        } else {
            None
        };
        let neck = Neck::new(&config, rng)?;
        let heads = STRIDES.map(|s| {
            DecoupledHead::new(
                config.neck_width,
                config.head_width,
                config.num_classes,
                config.reg_max,
                s,
                config.image_size,
                rng,
            )
        });
        Ok(Detector {
            config,
            backbone,
            ema,
            neck,
            heads,
        })
    }

    /// Backbone plus per-level attention.
    pub fn features(&self, image: &Tensor<T>, phase: &Phase<'_>) -> Result<FeaturePyramid<T>> {
        let p = self.backbone.forward(image, phase)?;
        match &self.ema {
            None => Ok(p),
            Some([e3, e4, e5]) => {
                FeaturePyramid::new(e3.forward(&p.f3)?, e4.forward(&p.f4)?, e5.forward(&p.f5)?)
            }
        }
    }

    pub fn forward(&self, image: &Tensor<T>, phase: &mut Phase<'_>) -> Result<Vec<HeadOutput<T>>> {
        let p = self.features(image, phase)?;
        let n = self.neck.forward(&p, phase)?;
        n.levels()
            .iter()
            .zip(&self.heads)
            .map(|(x, h)| h.forward(x, phase))
            .collect()
    }
}

impl<T: Scalar> Module<T> for Detector<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        if let Some(es) = &mut self.ema {
            for (i, e) in es.iter_mut().enumerate() {
                e.visit(&join(prefix, &format!("ema{}", i + 3)), f);
            }
        }
        self.neck.visit(&join(prefix, "neck"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit(&join(prefix, &format!("head{}", i + 3)), f);
        }
    }
}
