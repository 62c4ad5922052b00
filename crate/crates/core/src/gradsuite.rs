//! Finite-difference gradient suite over every differentiable block at toy shapes.
//!
//! Each block is checked in 64-bit precision against a seeded random projection of its
//! output, once per seed. Inputs of non-smooth ops are drawn away from their kinks so the
//! central difference never straddles one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::{GroundTruthBox, Rect};
use crate::cfp::{
    lvc_encode, lvc_gate, Codebook, EvcConfig, ExplicitVisualCenter, GlobalRegulation,
    LightweightMlp, MlpConfig, Stem,
};
use crate::detector::{
    assign_batch, bce_loss, ciou_loss_rows, dfl_loss_rows, loss_with_assignments, DecoupledHead,
    HeadOutput, LossConfig,
};
use crate::ema::EmaParams;
use crate::error::Result;
use crate::nn::{check_module, Activation, Linear, Phase};
use crate::pyramid::FeaturePyramid;
use crate::tensor::gradcheck::{check_inputs, GradcheckOptions, GradcheckReport};
use crate::tensor::{Conv2dOptions, PoolAxis, RunningStats, Tensor};

/// Largest relative error a block may show.
pub const TOLERANCE: f64 = 1e-4;

/// Default seeds for a suite run.
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type T64 = Tensor<f64>;
type Check = fn(u64) -> Result<GradcheckReport>;

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub name: &'static str,
    /// Worst case over all seeds.
    pub report: GradcheckReport,
    pub seeds: usize,
    pub error: Option<String>,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.report.passes(TOLERANCE)
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> T64 {
    T64::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> T64 {
    T64::from_fn(shape, |_| r.random_range(0.5..2.0))
}

/// Magnitudes in [0.1, 1] with random sign.
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> T64 {
    T64::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder with step 0.05, so no two entries are close.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> T64 {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(r);
    T64::new(v, shape).expect("shape matches")
}

fn opts(seed: u64) -> GradcheckOptions {
    GradcheckOptions {
        sample_seed: seed,
        ..GradcheckOptions::projected(seed ^ 0x5EED)
    }
}

fn module_opts(seed: u64) -> GradcheckOptions {
    opts(seed).with_max_elements(24)
}

fn op<F>(seed: u64, inputs: &[T64], f: F) -> Result<GradcheckReport>
where
    F: Fn(&[T64]) -> Result<T64>,
{
    check_inputs(f, inputs, &opts(seed))
}

/// Flattens and concatenates tensors into one vector.
fn flat(ts: &[&T64]) -> Result<T64> {
    let parts: Vec<T64> = ts
        .iter()
        .map(|t| t.reshape(&[t.numel()]))
        .collect::<Result<_>>()?;
    T64::concat(&parts, 0)
}

fn elementwise(seed: u64) -> Vec<(&'static str, Result<GradcheckReport>)> {
    let mut r = rng(seed, 1);
    let a = uniform(&[2, 3, 4], &mut r);
    let b = uniform(&[3, 1], &mut r);
    let c = uniform(&[4], &mut r);
    let d = off_zero(&[2, 3, 4], &mut r);
    let p = positive(&[2, 3, 4], &mut r);
    let gap = off_zero(&[2, 3, 4], &mut r);
    let a2 = a.add(&gap).expect("same shape");
    vec![
        (
            "add",
            op(seed, &[a.clone(), b.clone()], |x| x[0].add(&x[1])),
        ),
        (
            "sub",
            op(seed, &[a.clone(), c.clone()], |x| x[0].sub(&x[1])),
        ),
        (
            "mul",
            op(seed, &[a.clone(), b.clone()], |x| x[0].mul(&x[1])),
        ),
        (
            "div",
            op(seed, &[a.clone(), p.clone()], |x| x[0].div(&x[1])),
        ),
        (
            "maximum",
            op(seed, &[a.clone(), a2.clone()], |x| x[0].maximum(&x[1])),
        ),
        (
            "minimum",
            op(seed, &[a.clone(), a2], |x| x[0].minimum(&x[1])),
        ),
        ("neg", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].neg()))),
        ("scale", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].scale(1.7)))),
        (
            "add_scalar",
            op(seed, std::slice::from_ref(&a), |x| Ok(x[0].add_scalar(0.3))),
        ),
        ("square", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].square()))),
        ("sqrt", op(seed, std::slice::from_ref(&p), |x| Ok(x[0].sqrt()))),
        ("exp", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].exp()))),
        ("ln", op(seed, &[p], |x| Ok(x[0].ln()))),
        ("atan", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].atan()))),
        ("relu", op(seed, std::slice::from_ref(&d), |x| Ok(x[0].relu()))),
        ("clamp_min", op(seed, &[d], |x| Ok(x[0].clamp_min(0.0)))),
        ("sigmoid", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].sigmoid()))),
        ("silu", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].silu()))),
        ("softplus", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].softplus()))),
        ("softmax", op(seed, std::slice::from_ref(&a), |x| x[0].softmax(1))),
        ("log_softmax", op(seed, &[a], |x| x[0].log_softmax(2))),
    ]
}

fn structural(seed: u64) -> Vec<(&'static str, Result<GradcheckReport>)> {
    let mut r = rng(seed, 2);
    let a = uniform(&[2, 3, 4], &mut r);
    let b = uniform(&[2, 2, 4], &mut r);
    let img = uniform(&[1, 2, 3, 3], &mut r);
    let logits = uniform(&[3, 5], &mut r);
    let targets = T64::from_fn(&[3, 5], |_| r.random_range(0.0..1.0));
    vec![
        ("sum", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].sum()))),
        ("mean", op(seed, std::slice::from_ref(&a), |x| Ok(x[0].mean()))),
        (
            "sum_axis",
            op(seed, std::slice::from_ref(&a), |x| x[0].sum_axis(1, false)),
        ),
        (
            "mean_axis",
            op(seed, std::slice::from_ref(&a), |x| x[0].mean_axis(2, true)),
        ),
        ("reshape", op(seed, std::slice::from_ref(&a), |x| x[0].reshape(&[4, 6]))),
        (
            "permute",
            op(seed, std::slice::from_ref(&a), |x| x[0].permute(&[2, 0, 1])),
        ),
        ("concat", op(seed, &[a.clone(), b], |x| T64::concat(x, 1))),
        ("narrow", op(seed, std::slice::from_ref(&a), |x| x[0].narrow(1, 1, 2))),
        (
            "index_select",
            op(seed, &[a], |x| x[0].index_select(&[1, 0, 1])),
        ),
        (
            "upsample_nearest",
            op(seed, &[img], |x| x[0].upsample_nearest(2)),
        ),
        (
            "bce_with_logits",
            op(seed, &[logits], move |x| x[0].bce_with_logits(&targets)),
        ),
    ]
}

fn linear_algebra(seed: u64) -> Vec<(&'static str, Result<GradcheckReport>)> {
    let mut r = rng(seed, 3);
    let a = uniform(&[2, 3, 4], &mut r);
    let m = uniform(&[4, 5], &mut r);
    let x = uniform(&[3, 4], &mut r);
    let w = uniform(&[5, 4], &mut r);
    let bias = uniform(&[5], &mut r);
    let img = uniform(&[2, 4, 5, 5], &mut r);
    let k3 = uniform(&[3, 4, 3, 3], &mut r);
    let kb = uniform(&[3], &mut r);
    let dw = uniform(&[4, 1, 3, 3], &mut r);
    vec![
        ("matmul", op(seed, &[a, m], |x| x[0].matmul(&x[1]))),
        (
            "fully_connected",
            op(seed, &[x, w, bias], |x| {
                x[0].fully_connected(&x[1], Some(&x[2]))
            }),
        ),
        (
            "conv2d",
            op(seed, &[img.clone(), k3.clone(), kb], |x| {
                x[0].conv2d(&x[1], Some(&x[2]), Conv2dOptions::new(1, 1, 1))
            }),
        ),
        (
            "conv2d_strided",
            op(seed, &[img.clone(), k3], |x| {
                x[0].conv2d(&x[1], None, Conv2dOptions::new(2, 1, 1))
            }),
        ),
        (
            "conv2d_depthwise",
            op(seed, &[img, dw], |x| {
                x[0].conv2d(&x[1], None, Conv2dOptions::new(1, 1, 4))
            }),
        ),
    ]
}

fn normalization_pooling(seed: u64) -> Vec<(&'static str, Result<GradcheckReport>)> {
    let mut r = rng(seed, 4);
    let img = uniform(&[2, 4, 3, 5], &mut r);
    let gamma = positive(&[4], &mut r);
    let beta = uniform(&[4], &mut r);
    let ladder = distinct(&[2, 2, 4, 4], &mut r);
    vec![
        (
            "group_norm",
            op(seed, &[img.clone(), gamma.clone(), beta.clone()], |x| {
                x[0].group_norm(2, &x[1], &x[2], 1e-5)
            }),
        ),
        (
            "batch_norm",
            op(seed, &[img.clone(), gamma, beta], |x| {
                let (mut mean, mut var) = (vec![0.0; 4], vec![1.0; 4]);
                let stats = RunningStats {
                    mean: &mut mean,
                    var: &mut var,
                    momentum: 0.1,
                };
                x[0].batch_norm(&x[1], &x[2], stats, 1e-5, true)
            }),
        ),
        (
            "avg_pool_horizontal",
            op(seed, std::slice::from_ref(&img), |x| {
                x[0].directional_avg_pool(PoolAxis::Horizontal)
            }),
        ),
        (
            "avg_pool_vertical",
            op(seed, std::slice::from_ref(&img), |x| {
                x[0].directional_avg_pool(PoolAxis::Vertical)
            }),
        ),
        (
            "global_avg_pool",
            op(seed, &[img], |x| x[0].global_avg_pool_2d()),
        ),
        ("max_pool", op(seed, &[ladder], |x| x[0].max_pool2d_same(3))),
    ]
}

fn ema_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 10);
    let mut m = EmaParams::<f64>::new(16, 4, &mut r)?;
    let x = uniform(&[2, 16, 4, 4], &mut r);
    check_module(&mut m, &x, |m, x| m.forward(x), &module_opts(seed))
}

fn stem_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 11);
    let mut m = Stem::<f64>::new(8, 12, Activation::Silu, &mut r);
    let x = uniform(&[2, 8, 3, 3], &mut r);
    check_module(
        &mut m,
        &x,
        |m, x| m.forward(x, &Phase::train_deterministic()),
        &module_opts(seed),
    )
}

fn mlp_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 12);
    let mut report = GradcheckReport::default();
    for k in [1, 3] {
        let cfg = MlpConfig {
            dconv_kernel: k,
            layer_scale_init: 0.5,
            ..MlpConfig::default()
        };
        let mut m = LightweightMlp::<f64>::new(8, cfg, &mut r)?;
        let x = uniform(&[2, 8, 3, 3], &mut r);
        let f = |m: &LightweightMlp<f64>, x: &T64| m.forward(x, &mut Phase::train_deterministic());
        report.merge(&check_module(&mut m, &x, f, &module_opts(seed))?);
    }
    Ok(report)
}

/// Encoding followed by the channel gate, through codewords, smoothing and the FC layer.
fn lvc_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 13);
    let (k, c) = (4, 6);
    let x = uniform(&[2, c, 3, 3], &mut r);
    let codewords = uniform(&[k, c], &mut r);
    let raw = uniform(&[k], &mut r);
    let fc = Linear::<f64>::new(c, c, &mut r);
    let (w, bias) = (fc.weight.detach(), fc.bias.detach());
    let f = |xs: &[T64]| -> Result<T64> {
        let cb = Codebook {
            codewords: xs[1].clone(),
            smoothing_raw: xs[2].clone(),
        };
        let mut fc = Linear::<f64>::new(c, c, &mut ChaCha8Rng::seed_from_u64(0));
        fc.weight = xs[3].clone();
        fc.bias = xs[4].clone();
        let e = lvc_encode(&xs[0], &cb)?.sum_axis(1, false)?;
        lvc_gate(&xs[0], &e, &fc)
    };
    check_inputs(
        f,
        &[x, codewords, raw, w, bias],
        &opts(seed).with_max_elements(40),
    )
}

fn evc_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 14);
    let cfg = EvcConfig {
        width: 8,
        stem_act: Activation::Silu,
        mlp: Some(MlpConfig {
            layer_scale_init: 0.5,
            ..MlpConfig::default()
        }),
        codewords: Some(4),
    };
    let mut m = ExplicitVisualCenter::<f64>::new(6, cfg, &mut r)?;
    let x = uniform(&[2, 6, 3, 3], &mut r);
    let f =
        |m: &ExplicitVisualCenter<f64>, x: &T64| m.forward(x, &mut Phase::train_deterministic());
    check_module(&mut m, &x, f, &module_opts(seed))
}

fn gcr_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 15);
    let mut m = GlobalRegulation::<f64>::new([4, 6], 8, &mut r);
    let f3 = uniform(&[1, 4, 4, 4], &mut r);
    let f4 = uniform(&[1, 6, 2, 2], &mut r);
    let f5 = uniform(&[1, 8, 1, 1], &mut r);
    let center = uniform(&[1, 8, 1, 1], &mut r);
    let run = |m: &GlobalRegulation<f64>, xs: &[T64]| -> Result<T64> {
        let p = FeaturePyramid::new(xs[0].clone(), xs[1].clone(), xs[2].clone())?;
        let out = m.forward(&p, &xs[3])?;
        flat(&out.levels())
    };
    let levels = [f3.clone(), f4.clone(), f5.clone()];
    let mut report = check_module(
        &mut m,
        &center,
        |m, c| {
            run(
                m,
                &[
                    levels[0].clone(),
                    levels[1].clone(),
                    levels[2].clone(),
                    c.clone(),
                ],
            )
        },
        &module_opts(seed),
    )?;
    report.merge(&check_inputs(
        |xs| run(&m, xs),
        &[f3, f4, f5, center],
        &opts(seed),
    )?);
    Ok(report)
}

fn head_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 16);
    let mut m = DecoupledHead::<f64>::new(6, 8, 3, 4, 8, 32, &mut r);
    let x = uniform(&[2, 6, 3, 3], &mut r);
    let f = |m: &DecoupledHead<f64>, x: &T64| {
        let h = m.forward(x, &Phase::train_deterministic())?;
        flat(&[&h.cls, &h.reg])
    };
    check_module(&mut m, &x, f, &module_opts(seed))
}

fn random_boxes(n: usize, r: &mut ChaCha8Rng) -> T64 {
    let v = (0..n)
        .flat_map(|_| {
            let (x, y) = (r.random_range(0.0..10.0), r.random_range(0.0..10.0));
            let (w, h) = (r.random_range(1.0..6.0), r.random_range(1.0..6.0));
            [x, y, x + w, y + h]
        })
        .collect();
    T64::new(v, &[n, 4]).expect("n rows of 4")
}

fn losses(seed: u64) -> Vec<(&'static str, Result<GradcheckReport>)> {
    let mut r = rng(seed, 17);
    let logits = uniform(&[4, 3], &mut r);
    let targets = T64::from_fn(&[4, 3], |_| r.random_range(0.0..1.0));
    let pred = random_boxes(5, &mut r);
    let gt = random_boxes(5, &mut r);
    let dist = uniform(&[6, 8], &mut r);
    // fractional targets keep both neighbouring bins active
    let dfl_t: Vec<f64> = (0..6)
        .map(|i| i as f64 + r.random_range(0.1..0.9))
        .collect();
    vec![
        (
            "bce_loss",
            op(seed, &[logits], move |x| bce_loss(&x[0], &targets)),
        ),
        (
            "ciou_loss",
            op(seed, &[pred], move |x| ciou_loss_rows(&x[0], &gt)),
        ),
        (
            "dfl_loss",
            op(seed, &[dist], move |x| dfl_loss_rows(&x[0], &dfl_t)),
        ),
        ("detection_loss", detection_block(seed)),
    ]
}

/// Full loss over two toy levels with a fixed task-aligned assignment.
fn detection_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed, 18);
    let (nc, reg_max) = (2, 4);
    let shapes = [(8usize, 4usize), (16, 2)];
    let mut inputs = Vec::new();
    for &(_, g) in &shapes {
        inputs.push(uniform(&[1, nc, g, g], &mut r));
        inputs.push(uniform(&[1, 4 * (reg_max + 1), g, g], &mut r).scale(0.5));
    }
    let targets = vec![vec![
        GroundTruthBox {
            rect: Rect::new(3.3, 4.1, 17.2, 15.6),
            class: 0,
        },
        GroundTruthBox {
            rect: Rect::new(18.5, 12.0, 29.0, 30.2),
            class: 1,
        },
    ]];
    let heads = |xs: &[T64]| -> Vec<HeadOutput<f64>> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, &(stride, _))| HeadOutput {
                cls: xs[2 * i].clone(),
                reg: xs[2 * i + 1].clone(),
                stride,
            })
            .collect()
    };
    let cfg = LossConfig::default();
    // assignments are frozen at the unperturbed point, as they are during training
    let assigned = assign_batch(&heads(&inputs), &targets, &cfg)?;
    let f = |xs: &[T64]| Ok(loss_with_assignments(&heads(xs), &targets, &assigned, &cfg)?.total);
    check_inputs(f, &inputs, &opts(seed).with_max_elements(40))
}

fn module_blocks() -> Vec<(&'static str, Check)> {
    vec![
        ("ema", ema_block as Check),
        ("stem", stem_block),
        ("lightweight_mlp", mlp_block),
        ("lvc_encode_gate", lvc_block),
        ("evc", evc_block),
        ("gcr", gcr_block),
        ("head", head_block),
    ]
}

/// Runs every block over `seeds`, keeping the worst report per block.
pub fn run(seeds: &[u64]) -> Vec<BlockResult> {
    type Group = fn(u64) -> Vec<(&'static str, Result<GradcheckReport>)>;
    let groups: [Group; 5] = [
        elementwise,
        structural,
        linear_algebra,
        normalization_pooling,
        losses,
    ];
    let mut results: Vec<BlockResult> = Vec::new();
    let mut absorb = |name: &'static str, outcome: Result<GradcheckReport>| {
        let idx = match results.iter().position(|b| b.name == name) {
            Some(i) => i,
            None => {
                results.push(BlockResult {
                    name,
                    report: GradcheckReport::default(),
                    seeds: 0,
                    error: None,
                });
                results.len() - 1
            }
        };
        let b = &mut results[idx];
        b.seeds += 1;
        match outcome {
            Ok(rep) => b.report.merge(&rep),
            Err(e) => b.error = Some(e.to_string()),
        }
    };
    let per_seed: Vec<Vec<(&'static str, Result<GradcheckReport>)>> = seeds
        .par_iter()
        .map(|&s| {
            let mut v: Vec<_> = groups.iter().flat_map(|g| g(s)).collect();
            v.extend(module_blocks().into_iter().map(|(n, f)| (n, f(s))));
            v
        })
        .collect();
    for v in per_seed {
        for (name, outcome) in v {
            absorb(name, outcome);
        }
    }
    results
}
