//! Training loop: seeded shuffling and augmentation, SGD, periodic evaluation, checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::annotations::{format_annotations, parse_annotations};
use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Schedule};
use super::sgd::Sgd;
use super::synth::{derive_seed, synth_split, Scene, EVAL_SPLIT, TRAIN_SPLIT};
use crate::boxes::{DetectionBox, GroundTruthBox, Rect};
use crate::detector::{decode_predictions, detection_loss, DecodeConfig, Detector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::nn::Phase;
use crate::tensor::{io, Tensor};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const STEP_STREAM: u64 = 3;

/// Images of one size with their boxes.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// Each `[1, C, S, S]`.
    pub images: Vec<Tensor<f32>>,
    pub boxes: Vec<Vec<GroundTruthBox>>,
}

impl Dataset {
    pub fn from_scenes(scenes: Vec<Scene>, prefix: &str) -> Self {
        let mut d = Dataset::default();
        for (i, s) in scenes.into_iter().enumerate() {
            d.ids.push(format!("{prefix}{i:06}"));
            d.images.push(s.image);
            d.boxes.push(s.boxes);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes `images/<id>.crtt` and `annotations.txt` under `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        for (id, img) in self.ids.iter().zip(&self.images) {
            io::save(dir.join("images").join(format!("{id}.crtt")), img)?;
        }
        let text = format_annotations(
            self.ids
                .iter()
                .map(String::as_str)
                .zip(self.boxes.iter().map(Vec::as_slice)),
        );
        fs::write(dir.join("annotations.txt"), text)?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save_dir`]. Images are ordered by id; an image
    /// without annotation lines has no objects.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut annotations = parse_annotations(&fs::read_to_string(dir.join("annotations.txt"))?)?;
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir.join("images"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "crtt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        if let Some(missing) = annotations.keys().find(|k| ids.binary_search(k).is_err()) {
            return Err(Error::InvalidInput(format!(
                "annotations refer to missing image {missing}"
            )));
        }
        let mut d = Dataset::default();
        for id in ids {
            let img: Tensor<f32> = io::load(dir.join("images").join(format!("{id}.crtt")))?;
            if img.rank() != 4 || img.dim(0) != 1 {
                return Err(Error::InvalidInput(format!(
                    "image {id} must have shape [1, C, H, W]"
                )));
            }
            d.boxes.push(annotations.remove(&id).unwrap_or_default());
            d.images.push(img);
            d.ids.push(id);
        }
        Ok(d)
    }

    /// Stacks the given images into `[B, C, S, S]`.
    pub fn stack(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let first = self.images[idx[0]].shape();
        let mut data = Vec::with_capacity(idx.len() * self.images[idx[0]].numel());
        for &i in idx {
            if self.images[i].shape() != first {
                return Err(Error::InvalidInput(format!(
                    "image {} has a different shape",
                    self.ids[i]
                )));
            }
            data.extend_from_slice(self.images[i].data());
        }
        let mut shape = first.to_vec();
        shape[0] = idx.len();
        Tensor::new(data, &shape)
    }
}

/// Mirrors an image `[1, C, S, S]` and its boxes left to right.
fn flip(image: &[f32], w: usize, boxes: &mut [GroundTruthBox]) -> Vec<f32> {
    let mut out = Vec::with_capacity(image.len());
    for row in image.chunks(w) {
        out.extend(row.iter().rev());
    }
    let wf = w as f32;
    for b in boxes {
        b.rect = Rect::new(wf - b.rect.x2, b.rect.y1, wf - b.rect.x1, b.rect.y2);
    }
    out
}

/// Training batch with flip and intensity jitter drawn from `rng`.
fn augmented_batch(
    data: &Dataset,
    idx: &[usize],
    cfg: &RunConfig,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<f32>, Vec<Vec<GroundTruthBox>>)> {
    let shape = data.images[idx[0]].shape().to_vec();
    let w = shape[3];
    let j = cfg.train.jitter;
    let mut pixels = Vec::new();
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut boxes = data.boxes[i].clone();
        let mut img = data.images[i].to_vec();
        if cfg.train.flip && rng.random::<bool>() {
            img = flip(&img, w, &mut boxes);
        }
        if j > 0.0 {
            let (gain, bias) = (1.0 + rng.random_range(-j..j), rng.random_range(-j..j));
            img.iter_mut()
                .for_each(|v| *v = (*v as f64 * gain + bias) as f32);
        }
        pixels.extend(img);
        targets.push(boxes);
    }
    let mut s = shape;
    s[0] = idx.len();
    Ok((Tensor::new(pixels, &s)?, targets))
}

pub fn learning_rate(cfg: &RunConfig, iteration: u64, total: u64) -> f64 {
    let t = &cfg.train;
    let base = match t.schedule {
        Schedule::Constant => t.lr,
        Schedule::Cosine => {
            let floor = 0.01;
            let frac = iteration as f64 / total.max(1) as f64;
            t.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
        }
    };
    if (iteration as usize) < t.warmup_iters {
        base * (iteration + 1) as f64 / t.warmup_iters as f64
    } else {
        base
    }
}

/// Inference over a dataset in fixed-size batches.
pub fn predict(
    model: &Detector<f32>,
    data: &Dataset,
    decode: &DecodeConfig,
    batch: usize,
) -> Result<Vec<Vec<DetectionBox>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = data.stack(chunk)?;
        let heads = model.forward(&x, &mut Phase::eval())?;
        out.extend(decode_predictions(&heads, decode));
    }
    Ok(out)
}

pub fn evaluate_model(
    model: &Detector<f32>,
    data: &Dataset,
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    let preds = predict(model, data, decode, 16)?;
    Ok(evaluate(&preds, &data.boxes, model.config.num_classes))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where the metrics log, checkpoints and final report go.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many total iterations.
    pub stop_after: Option<u64>,
    /// Training data; synthesized from the scene config when absent.
    pub train_data: Option<Dataset>,
    pub eval_data: Option<Dataset>,
}

pub struct TrainResult {
    pub model: Detector<f32>,
    pub sgd: Sgd<f32>,
    /// Metrics log text, identical to the file written under `out_dir`.
    pub log: String,
    /// Total loss per iteration run by this call.
    pub losses: Vec<f64>,
    pub last_eval: Option<EvalReport>,
    pub iterations: u64,
}

struct Log {
    text: String,
    file: Option<fs::File>,
}

impl Log {
    fn line(&mut self, line: &str) -> Result<()> {
        self.text.push_str(line);
        self.text.push('\n');
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        log::debug!("{line}");
        Ok(())
    }
}

fn check_finite(iteration: u64, component: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            component,
            value,
        })
    }
}

fn save_checkpoint(
    dir: &Path,
    name: &str,
    cfg: &RunConfig,
    it: u64,
    model: &mut Detector<f32>,
    sgd: &Sgd<f32>,
) -> Result<()> {
    let ck = Checkpoint::capture(cfg, it, model, Some(sgd));
    ck.save(dir.join(name))?;
    ck.save(dir.join("last.crtk"))
}

pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainResult> {
    let mut cfg = cfg.clone();
    cfg.sync();
    cfg.validate()?;
    let t = cfg.train.clone();
    let train_data = match opts.train_data {
        Some(d) => d,
        None => Dataset::from_scenes(
            synth_split(&cfg.scene, TRAIN_SPLIT, t.train_images)?,
            "train",
        ),
    };
    let eval_data = match opts.eval_data {
        Some(d) => d,
        None => Dataset::from_scenes(synth_split(&cfg.scene, EVAL_SPLIT, t.eval_images)?, "eval"),
    };
    if train_data.is_empty() {
        return Err(Error::InvalidInput("no training images".into()));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, &[INIT_STREAM]));
    let mut model = Detector::<f32>::new(t.model.clone(), &mut init_rng)?;
    let mut sgd = Sgd::new(t.momentum, t.weight_decay);
    let mut start = 0u64;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        if ck.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint {} was written with a different configuration",
                path.display()
            )));
        }
        ck.restore(&mut model)?;
        ck.restore_optimizer(&mut sgd);
        start = ck.iteration;
    }

    let n = train_data.len();
    let per_epoch = n.div_ceil(t.batch_size) as u64;
    let total = per_epoch * t.epochs as u64;
    let end = opts.stop_after.map_or(total, |s| s.min(total));

    let mut log = Log {
        text: String::new(),
        file: None,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        log.file = Some(fs::File::create(dir.join("metrics.log"))?);
    }
    let decode = DecodeConfig {
        conf_threshold: t.eval_conf,
        nms_iou: t.nms_iou,
        max_det: t.max_det,
    };

    let mut losses = Vec::new();
    let mut last_eval = None;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;
    for it in start..end {
        let epoch = it / per_epoch;
        if epoch != order_epoch {
            order = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                t.seed,
                &[SHUFFLE_STREAM, epoch],
            )));
            order_epoch = epoch;
        }
        let pos = (it % per_epoch) as usize;
        let idx = &order[pos * t.batch_size..((pos + 1) * t.batch_size).min(n)];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, &[STEP_STREAM, it]));
        let (x, targets) = augmented_batch(&train_data, idx, &cfg, &mut rng)?;

        let heads = model.forward(&x, &mut Phase::train(&mut rng))?;
        let loss = detection_loss(&heads, &targets, &t.loss)?;
        for (name, v) in [("cls", loss.cls), ("box", loss.bbox), ("dfl", loss.dfl)] {
            check_finite(it + 1, name, v)?;
        }
        let total_loss = loss.total.item() as f64;
        check_finite(it + 1, "total", total_loss)?;
        loss.total.backward()?;
        let scale = if t.grad_clip > 0.0 {
            let norm = Sgd::grad_norm(&mut model);
            check_finite(it + 1, "gradient", norm)?;
            if norm > t.grad_clip {
                t.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let lr = learning_rate(&cfg, it, total);
        sgd.step(&mut model, lr, scale);
        losses.push(total_loss);

        let mut line = String::new();
        let _ = write!(
            line,
            "iter={} epoch={} lr={:.6e} total={:.6} cls={:.6} box={:.6} dfl={:.6} fg={}",
            it + 1,
            epoch + 1,
            lr,
            total_loss,
            loss.cls,
            loss.bbox,
            loss.dfl,
            loss.foreground
        );
        log.line(&line)?;

        let done = it + 1;
        let epoch_end = done % per_epoch == 0 || done == total;
        if epoch_end {
            let e = (done.div_ceil(per_epoch)) as usize;
            let last = done == total;
            if !eval_data.is_empty() && ((t.eval_every > 0 && e.is_multiple_of(t.eval_every)) || last) {
                let r = evaluate_model(&model, &eval_data, &decode)?;
                log.line(&format!(
                    "eval epoch={e} map50={:.6} map75={:.6} map={:.6}",
                    r.map50, r.map75, r.map
                ))?;
                log::info!("epoch {e}: map50 {:.4} map {:.4}", r.map50, r.map);
                last_eval = Some(r);
            }
            if let Some(dir) = &opts.out_dir {
                if (t.checkpoint_every > 0 && e.is_multiple_of(t.checkpoint_every)) || last {
                    save_checkpoint(
                        dir,
                        &format!("epoch{e:04}.crtk"),
                        &cfg,
                        done,
                        &mut model,
                        &sgd,
                    )?;
                }
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(dir, "final.crtk", &cfg, end, &mut model, &sgd)?;
        if let Some(r) = &last_eval {
            fs::write(dir.join("eval.txt"), r.key_values())?;
        }
    }
    Ok(TrainResult {
        model,
        sgd,
        log: log.text,
        losses,
        last_eval,
        iterations: end,
    })
}

/// Loads a model from a checkpoint, rebuilding it from the stored configuration.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Detector<f32>, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Detector::new(cfg.train.model.clone(), &mut rng)?;
    ck.restore(&mut model)?;
    Ok((model, cfg))
}
