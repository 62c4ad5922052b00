//! `key = value` run configuration covering the model, loss, optimizer and synthetic scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::synth::SceneConfig;
use crate::detector::{Ablation, DetectorConfig, LossConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;

/// Parses `key = value` lines; `#` starts a comment. Later keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Linear ramp from 0 over this many iterations.
    pub warmup_iters: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub train_images: usize,
    pub eval_images: usize,
    /// Evaluate every this many epochs (and after the last); 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Checkpoint every this many epochs (and after the last).
    pub checkpoint_every: usize,
    pub flip: bool,
    /// Half-width of the multiplicative and additive intensity jitter.
    pub jitter: f64,
    /// Confidence floor for the periodic evaluation.
    pub eval_conf: f64,
    pub conf: f64,
    pub nms_iou: f64,
    pub max_det: usize,
    pub model: DetectorConfig,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Small single-core setup: 96×96 inputs, 200 training scenes, 30 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            seed: 0,
            schedule: Schedule::Constant,
            warmup_iters: 50,
            grad_clip: 10.0,
            train_images: 200,
            eval_images: 50,
            eval_every: 5,
            checkpoint_every: 10,
            flip: true,
            jitter: 0.03,
            eval_conf: 0.001,
            conf: 0.25,
            nms_iou: 0.65,
            max_det: 300,
            model: DetectorConfig::desk(),
            loss: LossConfig::default(),
        }
    }

    /// Published full-scale recipe: batch 4, momentum 0.9, weight decay 1e-5, learning rate
    /// 1e-2, 640×640 inputs, 300 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 300,
            schedule: Schedule::Constant,
            warmup_iters: 0,
            grad_clip: 0.0,
            model: DetectorConfig {
                image_size: 640,
                ..DetectorConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("train_images", self.train_images),
            ("max_det", self.max_det),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let checks = [
            ("lr", self.lr >= 0.0),
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("weight_decay", self.weight_decay >= 0.0),
            ("grad_clip", self.grad_clip >= 0.0),
            ("jitter", (0.0..0.5).contains(&self.jitter)),
            ("eval_conf", (0.0..1.0).contains(&self.eval_conf)),
            ("conf", (0.0..1.0).contains(&self.conf)),
            ("nms_iou", (0.0..=1.0).contains(&self.nms_iou)),
        ];
        if let Some((k, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("{k} out of range")));
        }
        self.model.validate()
    }
}

/// Everything a run needs, serializable to canonical text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            scene: SceneConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

fn parse_list<V: FromStr, const N: usize>(key: &str, v: &str) -> Result<[V; N]> {
    let items: Vec<V> = v
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.sync();
        Ok(cfg)
    }

    /// Keeps derived fields consistent (class count and input size).
    pub fn sync(&mut self) {
        self.train.model.num_classes = self.scene.classes.len();
        self.train.model.image_size = self.scene.image_size;
        self.scene.seed = self.train.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut self.scene;
        match key {
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "schedule" => {
                t.schedule = match v {
                    "constant" => Schedule::Constant,
                    "cosine" => Schedule::Cosine,
                    _ => return Err(Error::Config(format!("schedule: unknown {v:?}"))),
                }
            }
            "warmup_iters" => t.warmup_iters = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "train_images" => t.train_images = parse(key, v)?,
            "eval_images" => t.eval_images = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "flip" => t.flip = parse_bool(key, v)?,
            "jitter" => t.jitter = parse(key, v)?,
            "eval_conf" => t.eval_conf = parse(key, v)?,
            "conf" => t.conf = parse(key, v)?,
            "nms_iou" => t.nms_iou = parse(key, v)?,
            "max_det" => t.max_det = parse(key, v)?,
            "image_size" => s.image_size = parse(key, v)?,
            "in_channels" => m.in_channels = parse(key, v)?,
            "widths" => m.widths = parse_list(key, v)?,
            "neck_width" => m.neck_width = parse(key, v)?,
            "head_width" => m.head_width = parse(key, v)?,
            "reg_max" => m.reg_max = parse(key, v)?,
            "ema_groups" => m.ema_groups = parse(key, v)?,
            "codewords" => m.codewords = parse(key, v)?,
            "mlp_ratio" => m.mlp.ratio = parse(key, v)?,
            "dconv_kernel" => m.mlp.dconv_kernel = parse(key, v)?,
            "layer_scale" => m.mlp.layer_scale_init = parse(key, v)?,
            "drop_path" => m.mlp.drop_path = parse(key, v)?,
            "stem_act" => {
                m.stem_act = Activation::parse(v)
                    .ok_or_else(|| Error::Config(format!("stem_act: unknown {v:?}")))?
            }
            "sppf" => m.sppf = parse_bool(key, v)?,
            "ema" => m.ablation.ema = parse_bool(key, v)?,
            "evc" => m.ablation.evc = parse_bool(key, v)?,
            "mlp" => m.ablation.mlp = parse_bool(key, v)?,
            "lvc" => m.ablation.lvc = parse_bool(key, v)?,
            "gcr" => m.ablation.gcr = parse_bool(key, v)?,
            "cls_weight" => t.loss.cls_weight = parse(key, v)?,
            "box_weight" => t.loss.box_weight = parse(key, v)?,
            "dfl_weight" => t.loss.dfl_weight = parse(key, v)?,
            "assign_alpha" => t.loss.assign.alpha = parse(key, v)?,
            "assign_beta" => t.loss.assign.beta = parse(key, v)?,
            "assign_topk" => t.loss.assign.topk = parse(key, v)?,
            "objects_min" => s.min_objects = parse(key, v)?,
            "objects_max" => s.max_objects = parse(key, v)?,
            "background" => s.background = parse(key, v)?,
            "noise" => s.noise = parse(key, v)?,
            "max_overlap" => s.max_overlap = parse(key, v)?,
            "classes" => {
                let catalog = SceneConfig::default().classes;
                s.classes = v
                    .split(',')
                    .map(|name| {
                        catalog
                            .iter()
                            .find(|c| c.name == name.trim())
                            .cloned()
                            .ok_or_else(|| {
                                Error::Config(format!("classes: unknown class {name:?}"))
                            })
                    })
                    .collect::<Result<_>>()?;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.train.model.ablation = a;
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let s = &self.scene;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        let list = |w: &[usize]| {
            w.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        kv("seed", t.seed.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("epochs", t.epochs.to_string());
        kv(
            "schedule",
            match t.schedule {
                Schedule::Constant => "constant",
                Schedule::Cosine => "cosine",
            }
            .into(),
        );
        kv("warmup_iters", t.warmup_iters.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("train_images", t.train_images.to_string());
        kv("eval_images", t.eval_images.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("flip", t.flip.to_string());
        kv("jitter", t.jitter.to_string());
        kv("eval_conf", t.eval_conf.to_string());
        kv("conf", t.conf.to_string());
        kv("nms_iou", t.nms_iou.to_string());
        kv("max_det", t.max_det.to_string());
        kv("image_size", s.image_size.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("widths", list(&m.widths));
        kv("neck_width", m.neck_width.to_string());
        kv("head_width", m.head_width.to_string());
        kv("reg_max", m.reg_max.to_string());
        kv("ema_groups", m.ema_groups.to_string());
        kv("codewords", m.codewords.to_string());
        kv("mlp_ratio", m.mlp.ratio.to_string());
        kv("dconv_kernel", m.mlp.dconv_kernel.to_string());
        kv("layer_scale", m.mlp.layer_scale_init.to_string());
        kv("drop_path", m.mlp.drop_path.to_string());
        kv("stem_act", m.stem_act.name().into());
        kv("sppf", m.sppf.to_string());
        kv("ema", m.ablation.ema.to_string());
        kv("evc", m.ablation.evc.to_string());
        kv("mlp", m.ablation.mlp.to_string());
        kv("lvc", m.ablation.lvc.to_string());
        kv("gcr", m.ablation.gcr.to_string());
        kv("cls_weight", t.loss.cls_weight.to_string());
        kv("box_weight", t.loss.box_weight.to_string());
        kv("dfl_weight", t.loss.dfl_weight.to_string());
        kv("assign_alpha", t.loss.assign.alpha.to_string());
        kv("assign_beta", t.loss.assign.beta.to_string());
        kv("assign_topk", t.loss.assign.topk.to_string());
        kv("objects_min", s.min_objects.to_string());
        kv("objects_max", s.max_objects.to_string());
        kv("background", s.background.to_string());
        kv("noise", s.noise.to_string());
        kv("max_overlap", s.max_overlap.to_string());
        kv("classes", s.class_names().join(","));
        o
    }

    /// First 8 bytes (little-endian) of the SHA-256 of the canonical text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}
