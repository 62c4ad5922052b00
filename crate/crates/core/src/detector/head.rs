use rand::RngCore;

use crate::error::Result;
use crate::nn::{join, Activation, Conv2d, ConvBnAct, Module, ParamKind, Phase};
use crate::tensor::{Scalar, Tensor};

/// Raw predictions of one pyramid level.
#[derive(Debug, Clone)]
pub struct HeadOutput<T: Scalar> {
    /// `[N, num_classes, h, w]`
    pub cls: Tensor<T>,
    /// `[N, 4 * (reg_max + 1), h, w]`, per-side distance distributions (left, top, right, bottom).
    pub reg: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn grid(&self) -> (usize, usize) {
        (self.cls.dim(2), self.cls.dim(3))
    }

    pub fn reg_max(&self) -> usize {
        self.reg.dim(1) / 4 - 1
    }

    pub fn num_classes(&self) -> usize {
        self.cls.dim(1)
    }
}

struct Branch<T: Scalar> {
    convs: [ConvBnAct<T>; 2],
    out: Conv2d<T>,
}

impl<T: Scalar> Branch<T> {
    fn new(cin: usize, width: usize, cout: usize, bias: f64, rng: &mut dyn RngCore) -> Self {
        let mut out = Conv2d::same(width, cout, 1, true, rng);
        out.bias = Some(Tensor::full(&[cout], T::lit(bias)).requiring_grad());
        Branch {
            convs: [
                ConvBnAct::new(cin, width, 3, 1, Activation::Silu, rng),
                ConvBnAct::new(width, width, 3, 1, Activation::Silu, rng),
            ],
            out,
        }
    }

    fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        let h = self.convs[1].forward(&self.convs[0].forward(x, phase)?, phase)?;
        self.out.forward(&h)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.convs[0].visit(&join(prefix, "conv0"), f);
        self.convs[1].visit(&join(prefix, "conv1"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// Decoupled head for one level: separate classification and box-distribution branches.
pub struct DecoupledHead<T: Scalar> {
    cls: Branch<T>,
    reg: Branch<T>,
    pub stride: usize,
}

impl<T: Scalar> DecoupledHead<T> {
    /// `image_size` only sets the classification bias prior (about five objects per image).
    pub fn new(
        cin: usize,
        width: usize,
        num_classes: usize,
        reg_max: usize,
        stride: usize,
        image_size: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let cells = ((image_size as f64 / stride as f64).powi(2)).max(1.0);
        let prior = (5.0 / num_classes as f64 / cells).min(0.5).ln();
        DecoupledHead {
            cls: Branch::new(cin, width, num_classes, prior, rng),
            reg: Branch::new(cin, width, 4 * (reg_max + 1), 1.0, rng),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<HeadOutput<T>> {
        Ok(HeadOutput {
            cls: self.cls.forward(x, phase)?,
            reg: self.reg.forward(x, phase)?,
            stride: self.stride,
        })
    }
}

impl<T: Scalar> Module<T> for DecoupledHead<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.cls.visit(&join(prefix, "cls"), f);
        self.reg.visit(&join(prefix, "reg"), f);
    }
}
