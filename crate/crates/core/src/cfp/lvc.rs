use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Linear, Module, ParamKind, Phase};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CODEWORDS: usize = 64;

/// `K` codewords of dimension `C` with positive smoothing factors `s_k = softplus(raw_k)`.
pub struct Codebook<T: Scalar> {
    /// `[K, C]`
    pub codewords: Tensor<T>,
    /// `[K]`, unconstrained.
    pub smoothing_raw: Tensor<T>,
}

fn inverse_softplus(s: f64) -> f64 {
    s + (-(-s).exp_m1()).ln()
}

impl<T: Scalar> Codebook<T> {
    pub fn new(k: usize, c: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if k == 0 || c == 0 {
            return Err(Error::InvalidCodebook(format!(
                "needs K >= 1 and C >= 1, got K={k}, C={c}"
            )));
        }
        let bound = 1.0 / (c as f64).sqrt();
        let codewords = (0..k * c)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        // s ~ U(0, 1), kept away from 0 so the inverse is finite
        let raw = (0..k)
            .map(|_| T::lit(inverse_softplus(rng.random_range(1e-3..1.0))))
            .collect();
        Ok(Codebook {
            codewords: Tensor::param(codewords, &[k, c])?,
            smoothing_raw: Tensor::param(raw, &[k])?,
        })
    }

    /// Codebook with explicit codewords `[K, C]` and positive smoothing factors.
    pub fn from_parts(codewords: Tensor<T>, smoothing: &[f64]) -> Result<Self> {
        if codewords.rank() != 2 || codewords.dim(0) != smoothing.len() {
            return Err(Error::InvalidCodebook(format!(
                "codewords {:?} with {} smoothing factors",
                codewords.shape(),
                smoothing.len()
            )));
        }
        if let Some(s) = smoothing.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidCodebook(format!(
                "smoothing factor {s} is not positive"
            )));
        }
        let raw = smoothing
            .iter()
            .map(|&s| T::lit(inverse_softplus(s)))
            .collect();
        Ok(Codebook {
            codewords: codewords.requiring_grad(),
            smoothing_raw: Tensor::param(raw, &[smoothing.len()])?,
        })
    }

    pub fn len(&self) -> usize {
        self.codewords.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codewords.dim(1)
    }

    pub fn smoothing(&self) -> Tensor<T> {
        self.smoothing_raw.softplus()
    }

    /// Positions of `x [N, C, H, W]` as `[N, H*W, C]`.
    fn positions(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = match *x.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "lvc",
                    format!("expected [N,C,H,W], got {:?}", x.shape()),
                ))
            }
        };
        if c != self.dim() {
            return Err(Error::InvalidCodebook(format!(
                "codeword dimension {} does not match {c} input channels",
                self.dim()
            )));
        }
        x.reshape(&[n, c, h * w])?.permute(&[0, 2, 1])
    }

    fn assign(&self, xs: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.len();
        let b = &self.codewords;
        // ||x - b||^2 = ||x||^2 - 2 x.b + ||b||^2
        let xx = xs.square().sum_axis(2, true)?;
        let xb = xs.matmul(&b.permute(&[1, 0])?)?;
        let bb = b.square().sum_axis(1, false)?.reshape(&[1, 1, k])?;
        let dist = xx.sub(&xb.scale(2.0))?.add(&bb)?;
        let s = self.smoothing().reshape(&[1, 1, k])?;
        dist.mul(&s)?.neg().softmax(2)
    }

    /// Soft-assignment weights `[N, H*W, K]`; each row sums to one.
    pub fn assignments(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.assign(&self.positions(x)?)
    }
}

impl<T: Scalar> Module<T> for Codebook<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(
            &join(prefix, "codewords"),
            ParamKind::Trainable,
            &mut self.codewords,
        );
        f(
            &join(prefix, "smoothing_raw"),
            ParamKind::Trainable,
            &mut self.smoothing_raw,
        );
    }
}

/// Per-codeword residual encodings `e_k = sum_i a_ik (x_i - b_k)` as `[N, K, C]`, where
/// `a_ik` is the softmax over `k` of `-s_k ||x_i - b_k||^2`.
pub fn lvc_encode<T: Scalar>(x: &Tensor<T>, codebook: &Codebook<T>) -> Result<Tensor<T>> {
    let xs = codebook.positions(x)?;
    let a = codebook.assign(&xs)?;
    let n = xs.dim(0);
    let k = codebook.len();
    let weighted = a.permute(&[0, 2, 1])?.matmul(&xs)?;
    let mass = a.sum_axis(1, false)?.reshape(&[n, k, 1])?;
    weighted.sub(&mass.mul(&codebook.codewords.reshape(&[1, k, codebook.dim()])?)?)
}

/// `x ⊕ (x ⊗ σ(FC(e)))`: channel gate broadcast over space, added back to the input.
pub fn lvc_gate<T: Scalar>(x: &Tensor<T>, e: &Tensor<T>, fc: &Linear<T>) -> Result<Tensor<T>> {
    let (n, c) = (x.dim(0), x.dim(1));
    let gate = fc.forward(e)?.sigmoid().reshape(&[n, c, 1, 1])?;
    x.add(&x.mul(&gate)?)
}

pub struct LearnableVisualCenter<T: Scalar> {
    pub codebook: Codebook<T>,
    /// Normalizes each codeword's encoding.
    pub bn: BatchNorm2d<T>,
    pub fc: Linear<T>,
}

impl<T: Scalar> LearnableVisualCenter<T> {
    pub fn new(channels: usize, codewords: usize, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(LearnableVisualCenter {
            codebook: Codebook::new(codewords, channels, rng)?,
            bn: BatchNorm2d::new(codewords),
            fc: Linear::new(channels, channels, rng),
        })
    }

    /// `e = sum_k ReLU(BN(e_k))`, one `C`-vector per sample.
    pub fn encode(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        let ek = lvc_encode(x, &self.codebook)?;
        self.bn.forward(&ek, phase)?.relu().sum_axis(1, false)
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        lvc_gate(x, &self.encode(x, phase)?, &self.fc)
    }
}

impl<T: Scalar> Module<T> for LearnableVisualCenter<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.codebook.visit(&join(prefix, "codebook"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }
}
