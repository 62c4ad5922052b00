//! Parameterized layers built on [`Tensor`] operations.

use std::sync::Mutex;

use rand::{Rng, RngCore};

use crate::error::Result;
use crate::tensor::gradcheck::{
    checked_backward, coordinates, GradcheckOptions, GradcheckReport, Reducer,
};
use crate::tensor::{Conv2dOptions, RunningStats, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State saved with the model but not trained (running statistics).
    Buffer,
}

/// Anything that owns named tensors.
pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Snapshot of every named tensor of a module, in visit order.
pub fn named_tensors<T: Scalar, M: Module<T> + ?Sized>(
    m: &mut M,
) -> Vec<(String, ParamKind, Tensor<T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, kind, t| {
        out.push((name.to_string(), kind, t.clone()))
    });
    out
}

pub fn parameter_count<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            n += t.numel()
        }
    });
    n
}

/// Drops accumulated gradients by replacing each trainable tensor with a fresh leaf.
pub fn zero_grads<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) {
    m.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            t.zero_grad();
        }
    });
}

/// Forward-pass mode. Training uses batch statistics; stochastic layers only fire when an
/// RNG is supplied.
pub struct Phase<'a> {
    training: bool,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Phase<'a> {
    pub fn eval() -> Self {
        Phase {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Phase {
            training: true,
            rng: Some(rng),
        }
    }

    /// Batch statistics without stochastic layers; used for gradient checks.
    pub fn train_deterministic() -> Self {
        Phase {
            training: true,
            rng: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> Option<&mut (dyn RngCore + 'a)> {
        self.rng.as_deref_mut()
    }
}

pub(crate) fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::param(data, shape).expect("non-empty parameter shape")
}

pub(crate) fn constant<T: Scalar>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::full(shape, T::lit(value)).requiring_grad()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Silu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Silu => x.silu(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
        }
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub opts: Conv2dOptions,
}

impl<T: Scalar> Conv2d<T> {
    /// Uniform init in `±1/sqrt(fan_in)` for weight and bias.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOptions,
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let fan_in = cin / opts.groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: uniform(&[cout, cin / opts.groups, kernel, kernel], bound, rng),
            bias: bias.then(|| uniform(&[cout], bound, rng)),
            opts,
        }
    }

    /// Same-size convolution (stride 1, padding `kernel / 2`).
    pub fn same(cin: usize, cout: usize, kernel: usize, bias: bool, rng: &mut dyn RngCore) -> Self {
        Self::new(
            cin,
            cout,
            kernel,
            Conv2dOptions::new(1, kernel / 2, 1),
            bias,
            rng,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1) * self.opts.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.opts)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(
            &join(prefix, "weight"),
            ParamKind::Trainable,
            &mut self.weight,
        );
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }
}

pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running: Mutex<[Tensor<T>; 2]>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: constant(&[c], 1.0),
            beta: constant(&[c], 0.0),
            running: Mutex::new([Tensor::zeros(&[c]), Tensor::ones(&[c])]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn running_stats(&self) -> (Vec<T>, Vec<T>) {
        let r = self.running.lock().expect("running stats lock poisoned");
        (r[0].to_vec(), r[1].to_vec())
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        let mut r = self.running.lock().expect("running stats lock poisoned");
        let (mut mean, mut var) = (r[0].to_vec(), r[1].to_vec());
        let y = x.batch_norm(
            &self.gamma,
            &self.beta,
            RunningStats {
                mean: &mut mean,
                var: &mut var,
                momentum: self.momentum,
            },
            self.eps,
            phase.is_training(),
        )?;
        if phase.is_training() {
            r[0] = r[0].with_data(mean)?;
            r[1] = r[1].with_data(var)?;
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(
            &join(prefix, "gamma"),
            ParamKind::Trainable,
            &mut self.gamma,
        );
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
        let r = self.running.get_mut().expect("running stats lock poisoned");
        f(&join(prefix, "running_mean"), ParamKind::Buffer, &mut r[0]);
        f(&join(prefix, "running_var"), ParamKind::Buffer, &mut r[1]);
    }
}

pub struct GroupNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        GroupNorm {
            gamma: constant(&[channels], 1.0),
            beta: constant(&[channels], 0.0),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gamma, &self.beta, self.eps)
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(
            &join(prefix, "gamma"),
            ParamKind::Trainable,
            &mut self.gamma,
        );
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        Linear {
            weight: uniform(&[cout, cin], bound, rng),
            bias: uniform(&[cout], bound, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.fully_connected(&self.weight, Some(&self.bias))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(
            &join(prefix, "weight"),
            ParamKind::Trainable,
            &mut self.weight,
        );
        f(&join(prefix, "bias"), ParamKind::Trainable, &mut self.bias);
    }
}

/// Convolution, batch normalization, activation.
pub struct ConvBnAct<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Activation,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        ConvBnAct {
            conv: Conv2d::new(
                cin,
                cout,
                kernel,
                Conv2dOptions::new(stride, kernel / 2, 1),
                false,
                rng,
            ),
            bn: BatchNorm2d::new(cout),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        Ok(self
            .act
            .apply(&self.bn.forward(&self.conv.forward(x)?, phase)?))
    }
}

impl<T: Scalar> Module<T> for ConvBnAct<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Stochastic depth: zeroes whole samples of a residual branch with probability `rate` and
/// rescales survivors by `1 / (1 - rate)`. Identity outside training or without an RNG.
pub fn drop_path<T: Scalar>(x: &Tensor<T>, rate: f64, phase: &mut Phase<'_>) -> Result<Tensor<T>> {
    if !phase.is_training() || rate <= 0.0 {
        return Ok(x.clone());
    }
    let Some(rng) = phase.rng() else {
        return Ok(x.clone());
    };
    let keep = 1.0 - rate;
    let n = x.dim(0);
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                T::lit(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    let mut shape = vec![1; x.rank()];
    shape[0] = n;
    x.mul(&Tensor::new(mask, &shape)?)
}

/// Replaces the named trainable tensor's data, keeping it a gradient leaf.
fn set_param<T: Scalar, M: Module<T> + ?Sized>(m: &mut M, target: &str, data: &[T]) {
    m.visit("", &mut |name, _, t| {
        if name == target {
            *t = Tensor::param(data.to_vec(), t.shape()).expect("same shape");
        }
    });
}

/// Gradient check of `f(module, input)` with respect to the input and every trainable
/// parameter of `module`.
pub fn check_module<M, F>(
    module: &mut M,
    input: &Tensor<f64>,
    f: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    M: Module<f64> + ?Sized,
    F: Fn(&M, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    // Fresh leaves so no stale gradient is mixed in.
    module.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            *t = t.requiring_grad();
        }
    });
    let x = input.requiring_grad();
    let out = f(module, &x)?;
    let reducer = Reducer::new(opts.reduction, out.numel());
    checked_backward(&out, &reducer)?;

    let mut report = GradcheckReport::default();
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    for j in coordinates(x.numel(), opts, 0) {
        let eval = |delta: f64| -> Result<f64> {
            let mut d = input.to_vec();
            d[j] += delta;
            Ok(reducer.value(&f(module, &Tensor::new(d, input.shape())?)?))
        };
        let numeric = (eval(opts.epsilon)? - eval(-opts.epsilon)?) / (2.0 * opts.epsilon);
        report.record(0, j, analytic[j], numeric, opts.floor);
    }

    let params: Vec<(String, Tensor<f64>)> = named_tensors(module)
        .into_iter()
        .filter(|(_, k, _)| *k == ParamKind::Trainable)
        .map(|(n, _, t)| (n, t))
        .collect();
    for (i, (name, p)) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        for j in coordinates(p.numel(), opts, i as u64 + 1) {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[j] += delta;
                set_param(module, name, &d);
                Ok(reducer.value(&f(module, input)?))
            };
            let plus = probe(opts.epsilon)?;
            let minus = probe(-opts.epsilon)?;
            set_param(module, name, &base);
            report.record(
                i + 1,
                j,
                analytic[j],
                (plus - minus) / (2.0 * opts.epsilon),
                opts.floor,
            );
        }
    }
    Ok(report)
}
