//! Central-difference gradient checking in 64-bit precision.
//!
//! The function under test returns a tensor; it is reduced to a scalar either by a plain sum
//! or by a fixed random projection `sum(w * y)`. The projection matters for blocks whose plain
//! sum is constant (normalization layers), where a sum would make every gradient zero.
//!
//! Per-element error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`; the floor
//! keeps round-off on near-zero gradients from dominating the relative error.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ComputationTape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduction {
    Sum,
    Projection { seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    pub reduction: Reduction,
    pub floor: f64,
    /// Upper bound on checked coordinates per input; `None` checks all of them.
    pub max_elements: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            epsilon: 1e-6,
            reduction: Reduction::Sum,
            floor: 1e-3,
            max_elements: None,
            sample_seed: 0,
        }
    }
}

impl GradcheckOptions {
    pub fn projected(seed: u64) -> Self {
        GradcheckOptions {
            reduction: Reduction::Projection { seed },
            ..Self::default()
        }
    }

    pub fn with_max_elements(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstCoordinate>,
}

impl GradcheckReport {
    pub fn passes(&self, max_rel_err: f64) -> bool {
        self.checked > 0 && self.max_rel_err < max_rel_err
    }

    pub fn merge(&mut self, other: &GradcheckReport) {
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.or(self.worst);
        }
        self.checked += other.checked;
    }

    pub(crate) fn record(
        &mut self,
        input: usize,
        index: usize,
        analytic: f64,
        numeric: f64,
        floor: f64,
    ) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some(WorstCoordinate {
                input,
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// Reduces outputs to a scalar according to a [`Reduction`].
pub(crate) struct Reducer {
    weights: Option<Vec<f64>>,
}

impl Reducer {
    pub(crate) fn new(reduction: Reduction, len: usize) -> Self {
        let weights = match reduction {
            Reduction::Sum => None,
            Reduction::Projection { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
            }
        };
        Reducer { weights }
    }

    pub(crate) fn tensor(&self, y: &Tensor<f64>) -> Result<Tensor<f64>> {
        match &self.weights {
            None => Ok(y.sum()),
            Some(w) => Ok(y.mul(&Tensor::new(w.clone(), y.shape())?)?.sum()),
        }
    }

    pub(crate) fn value(&self, y: &Tensor<f64>) -> f64 {
        match &self.weights {
            None => y.data().iter().sum(),
            Some(w) => y.data().iter().zip(w).map(|(a, b)| a * b).sum(),
        }
    }
}

/// Records the graph of `out`, rejecting non-finite intermediates by op name.
pub(crate) fn checked_backward(out: &Tensor<f64>, reducer: &Reducer) -> Result<()> {
    ComputationTape::record(out).check_finite()?;
    if !out.all_finite() {
        return Err(Error::NonFinite {
            op: out.op_name().unwrap_or("output").to_string(),
        });
    }
    let root = reducer.tensor(out)?;
    ComputationTape::record(&root).backward_from(&root, vec![1.0])
}

pub(crate) fn coordinates(len: usize, opts: &GradcheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_elements {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.sample_seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks the gradient of `f` with respect to every tensor in `points`.
pub fn check_inputs<F>(
    f: F,
    points: &[Tensor<f64>],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = points.iter().map(|p| p.requiring_grad()).collect();
    let out = f(&leaves)?;
    let reducer = Reducer::new(opts.reduction, out.numel());
    checked_backward(&out, &reducer)?;

    let mut report = GradcheckReport::default();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for j in coordinates(leaf.numel(), opts, i as u64) {
            let eval = |delta: f64| -> Result<f64> {
                let inputs: Vec<Tensor<f64>> = points
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let mut d = p.to_vec();
                        if k == i {
                            d[j] += delta;
                        }
                        Tensor::new(d, p.shape())
                    })
                    .collect::<Result<_>>()?;
                Ok(reducer.value(&f(&inputs)?))
            };
            let numeric = (eval(opts.epsilon)? - eval(-opts.epsilon)?) / (2.0 * opts.epsilon);
            report.record(i, j, analytic[j], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Single-input gradient check, reducing the output by summation.
pub fn finite_diff_gradcheck<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let opts = GradcheckOptions {
        epsilon,
        ..GradcheckOptions::default()
    };
    check_inputs(|xs| f(&xs[0]), std::slice::from_ref(point), &opts)
}
