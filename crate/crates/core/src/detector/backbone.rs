use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{join, Activation, ConvBnAct, Module, ParamKind, Phase};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{Scalar, Tensor};

/// Spatial pyramid pooling (fast): 1×1 reduce, three chained 5×5 max pools, concatenate all
/// four maps, 1×1 back to the input width.
pub struct Sppf<T: Scalar> {
    pub reduce: ConvBnAct<T>,
    pub expand: ConvBnAct<T>,
}

impl<T: Scalar> Sppf<T> {
    pub fn new(c: usize, rng: &mut dyn RngCore) -> Self {
        let hidden = (c / 2).max(1);
        Sppf {
            reduce: ConvBnAct::new(c, hidden, 1, 1, Activation::Silu, rng),
            expand: ConvBnAct::new(4 * hidden, c, 1, 1, Activation::Silu, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        let a = self.reduce.forward(x, phase)?;
        let b = a.max_pool2d_same(5)?;
        let c = b.max_pool2d_same(5)?;
        let d = c.max_pool2d_same(5)?;
        self.expand
            .forward(&Tensor::concat(&[a, b, c, d], 1)?, phase)
    }
}

impl<T: Scalar> Module<T> for Sppf<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }
}

/// Small strided conv-BN-SiLU stack. Two stride-2 convolutions reach stride 4; each of the
/// three output stages is a stride-2 conv followed by a stride-1 conv.
pub struct Backbone<T: Scalar> {
    pub stem: [ConvBnAct<T>; 2],
    pub stages: [[ConvBnAct<T>; 2]; 3],
    pub sppf: Option<Sppf<T>>,
    pub widths: [usize; 3],
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cin: usize, widths: [usize; 3], sppf: bool, rng: &mut dyn RngCore) -> Self {
        let act = Activation::Silu;
        let half = (widths[0] / 2).max(1);
        let stem = [
            ConvBnAct::new(cin, half, 3, 2, act, rng),
            ConvBnAct::new(half, widths[0], 3, 2, act, rng),
        ];
        let mut prev = widths[0];
        let stages = widths.map(|w| {
            let s = [
                ConvBnAct::new(prev, w, 3, 2, act, rng),
                ConvBnAct::new(w, w, 3, 1, act, rng),
            ];
            prev = w;
            s
        });
        Backbone {
            stem,
            stages,
            sppf: sppf.then(|| Sppf::new(widths[2], rng)),
            widths,
        }
    }

    pub fn forward(&self, image: &Tensor<T>, phase: &Phase<'_>) -> Result<FeaturePyramid<T>> {
        if image.rank() != 4 {
            return Err(Error::shape(
                "backbone",
                format!("expected [N,C,S,S], got {:?}", image.shape()),
            ));
        }
        for &s in &image.shape()[2..] {
            if s % 32 != 0 {
                return Err(Error::InvalidInputSize {
                    size: s,
                    divisor: 32,
                });
            }
        }
        let mut x = image.clone();
        for layer in &self.stem {
            x = layer.forward(&x, phase)?;
        }
        let mut levels = Vec::with_capacity(3);
        for [down, refine] in &self.stages {
            x = refine.forward(&down.forward(&x, phase)?, phase)?;
            levels.push(x.clone());
        }
        if let Some(sppf) = &self.sppf {
            levels[2] = sppf.forward(&levels[2], phase)?;
        }
        let [f3, f4, f5]: [Tensor<T>; 3] = levels.try_into().expect("three stages");
        FeaturePyramid::new(f3, f4, f5)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for (i, l) in self.stem.iter_mut().enumerate() {
            l.visit(&join(prefix, &format!("stem{i}")), f);
        }
        for (i, [a, b]) in self.stages.iter_mut().enumerate() {
            a.visit(&join(prefix, &format!("stage{}.down", i + 3)), f);
            b.visit(&join(prefix, &format!("stage{}.refine", i + 3)), f);
        }
        if let Some(s) = &mut self.sppf {
            s.visit(&join(prefix, "sppf"), f);
        }
    }
}
