//! Stochastic gradient descent with heavy-ball momentum and L2 weight decay.

use std::collections::BTreeMap;

use crate::nn::{Module, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// One update in place: `v <- momentum*v + g + weight_decay*p`, `p <- p - lr*v`.
pub fn sgd_step<T: Scalar>(
    p: &mut [T],
    g: &[T],
    v: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Global L2 norm of the current gradients.
    pub fn grad_norm<M: Module<T> + ?Sized>(model: &mut M) -> f64 {
        let mut sq = 0.0;
        model.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                if let Some(g) = t.grad() {
                    sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
                }
            }
        });
        sq.sqrt()
    }

    /// Applies one step to every trainable tensor, scaling gradients by `grad_scale`.
    /// Parameters are replaced by fresh leaves, which also clears their gradients.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64, grad_scale: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit("", &mut |name, kind, t| {
            if kind != ParamKind::Trainable {
                return;
            }
            let mut g = t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
            if grad_scale != 1.0 {
                let s = T::lit(grad_scale);
                g.iter_mut().for_each(|v| *v *= s);
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); t.numel()]);
            let mut p = t.to_vec();
            sgd_step(&mut p, &g, v, lr, mu, wd);
            *t = Tensor::param(p, t.shape()).expect("shape unchanged");
        });
    }
}
