//! `crt`: synthesize data, train, evaluate, run inference and check gradients.
//!
//! Exit status is 0 on success, 1 for invalid input or usage, 2 for runtime failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crt_core::boxes::DetectionBox;
use crt_core::data::synth::{EVAL_SPLIT, TRAIN_SPLIT};
use crt_core::data::{
    format_predictions, load_model, parse_annotations, parse_predictions, predict, synth_split,
    train, Dataset, RunConfig, TrainOptions,
};
use crt_core::detector::DecodeConfig;
use crt_core::eval::evaluate;
use crt_core::gradsuite;
use crt_core::tensor::io;
use crt_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "crt",
    version,
    about = "Thermal-infrared detector with a centralized feature pyramid"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Disable the attention block on the backbone output.
    #[arg(long, global = true)]
    no_ema: bool,
    /// Disable the explicit visual center.
    #[arg(long, global = true)]
    no_evc: bool,
    /// Disable the lightweight MLP branch.
    #[arg(long, global = true)]
    no_mlp: bool,
    /// Disable the learnable visual center branch.
    #[arg(long, global = true)]
    no_lvc: bool,
    /// Disable top-down global regulation.
    #[arg(long, global = true)]
    no_gcr: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train and eval splits.
    Synth {
        /// Training scenes (default from the configuration).
        #[arg(long)]
        train: Option<usize>,
        /// Held-out scenes.
        #[arg(long)]
        eval: Option<usize>,
    },
    /// Train a detector and write checkpoints and a metrics log.
    Train {
        /// Dataset directory from `crt synth`; scenes are generated in memory when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop after this many iterations in total.
        #[arg(long)]
        max_iters: Option<u64>,
    },
    /// Score a predictions file against ground-truth annotations.
    Eval {
        #[arg(long, value_name = "PATH")]
        gt: PathBuf,
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        /// Number of classes (default from the configuration).
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Run a checkpoint over images and write predictions.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory of `.crtt` images, or a dataset directory containing `images/`.
        #[arg(long, value_name = "DIR")]
        images: PathBuf,
        /// Predictions file (default `<out-dir>/predictions.txt`, or stdout).
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
        /// Confidence threshold (default from the checkpoint configuration).
        #[arg(long)]
        conf: Option<f64>,
    },
    /// Finite-difference gradient check of every block.
    Gradcheck {
        /// Number of random seeds per block.
        #[arg(long, default_value_t = gradsuite::SEEDS.len() as u64)]
        seeds: u64,
    },
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            require(p)?;
            RunConfig::from_text(&fs::read_to_string(p)?)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let a = &mut cfg.train.model.ablation;
    a.ema &= !g.no_ema;
    a.evc &= !g.no_evc;
    a.mlp &= !g.no_mlp;
    a.lvc &= !g.no_lvc;
    a.gcr &= !g.no_gcr;
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn synth(g: &Global, n_train: Option<usize>, n_eval: Option<usize>) -> Result<()> {
    let cfg = run_config(g)?;
    let out = g.out_dir.clone().unwrap_or_else(|| "data".into());
    let n_train = n_train.unwrap_or(cfg.train.train_images);
    let n_eval = n_eval.unwrap_or(cfg.train.eval_images);
    for (name, split, n) in [
        ("train", TRAIN_SPLIT, n_train),
        ("eval", EVAL_SPLIT, n_eval),
    ] {
        let d = Dataset::from_scenes(synth_split(&cfg.scene, split, n)?, "");
        d.save_dir(out.join(name))?;
        let objects: usize = d.boxes.iter().map(Vec::len).sum();
        println!(
            "{name}: {n} images, {objects} objects -> {}",
            out.join(name).display()
        );
    }
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn train_cmd(
    g: &Global,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    max_iters: Option<u64>,
) -> Result<()> {
    let cfg = run_config(g)?;
    let out = g.out_dir.clone().unwrap_or_else(|| "runs/train".into());
    let (train_data, eval_data) = match &data {
        Some(d) => {
            require(d)?;
            (
                Some(Dataset::load_dir(d.join("train"))?),
                Some(Dataset::load_dir(d.join("eval"))?),
            )
        }
        None => (None, None),
    };
    if let Some(r) = &resume {
        require(r)?;
    }
    let result = train(
        &cfg,
        TrainOptions {
            out_dir: Some(out.clone()),
            resume,
            stop_after: max_iters,
            train_data,
            eval_data,
        },
    )?;
    println!(
        "{} iterations; outputs in {}",
        result.iterations,
        out.display()
    );
    if let Some(last) = result.losses.last() {
        println!("final loss {last:.6}");
    }
    if let Some(r) = &result.last_eval {
        print!("{}", r.table(&cfg.scene.class_names()));
    }
    Ok(())
}

fn eval_cmd(g: &Global, gt: &Path, pred: &Path, num_classes: Option<usize>) -> Result<()> {
    require(gt)?;
    require(pred)?;
    let cfg = run_config(g)?;
    let gts = parse_annotations(&fs::read_to_string(gt)?)?;
    let preds = parse_predictions(&fs::read_to_string(pred)?)?;
    let nc = num_classes.unwrap_or(cfg.scene.classes.len());
    let mut ids: Vec<&String> = gts.keys().chain(preds.keys()).collect();
    ids.sort();
    ids.dedup();
    let max_class = gts
        .values()
        .flatten()
        .map(|b| b.class)
        .chain(preds.values().flatten().map(|d| d.class))
        .max();
    if let Some(c) = max_class.filter(|&c| c >= nc) {
        return Err(Error::InvalidInput(format!(
            "class {c} is out of range for {nc} classes"
        )));
    }
    let p: Vec<Vec<DetectionBox>> = ids
        .iter()
        .map(|id| preds.get(*id).cloned().unwrap_or_default())
        .collect();
    let t: Vec<_> = ids
        .iter()
        .map(|id| gts.get(*id).cloned().unwrap_or_default())
        .collect();
    let report = evaluate(&p, &t, nc);
    let names = cfg.scene.class_names();
    print!("{}", report.table(&names[..names.len().min(nc)]));
    println!(
        "mAP50 = {:.4}  mAP75 = {:.4}  mAP = {:.4}",
        report.map50, report.map75, report.map
    );
    if let Some(dir) = &g.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.txt"), report.key_values())?;
    }
    Ok(())
}

fn load_images(dir: &Path) -> Result<Dataset> {
    require(dir)?;
    let dir = if dir.join("images").is_dir() {
        dir.join("images")
    } else {
        dir.to_path_buf()
    };
    let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "crtt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                found.insert(stem.to_string(), path.clone());
            }
        }
    }
    if found.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .crtt images in {}",
            dir.display()
        )));
    }
    let mut d = Dataset::default();
    for (id, path) in found {
        d.images.push(io::load(&path)?);
        d.boxes.push(Vec::new());
        d.ids.push(id);
    }
    Ok(d)
}

fn infer(
    g: &Global,
    checkpoint: &Path,
    images: &Path,
    output: Option<PathBuf>,
    conf: Option<f64>,
) -> Result<()> {
    require(checkpoint)?;
    let (model, cfg) = load_model(checkpoint)?;
    let data = load_images(images)?;
    let c = model.config.in_channels;
    if let Some(i) = data
        .images
        .iter()
        .position(|t| t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != c)
    {
        return Err(Error::InvalidInput(format!(
            "image {} has shape {:?}; expected [1, {c}, H, W]",
            data.ids[i],
            data.images[i].shape()
        )));
    }
    let decode = DecodeConfig {
        conf_threshold: conf.unwrap_or(cfg.train.conf),
        nms_iou: cfg.train.nms_iou,
        max_det: cfg.train.max_det,
    };
    let preds = predict(&model, &data, &decode, 1)?;
    let text = format_predictions(
        data.ids
            .iter()
            .map(String::as_str)
            .zip(preds.iter().map(Vec::as_slice)),
    );
    let target = output.or_else(|| g.out_dir.as_ref().map(|d| d.join("predictions.txt")));
    match target {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, text)?;
            let total: usize = preds.iter().map(Vec::len).sum();
            println!(
                "{total} detections over {} images -> {}",
                preds.len(),
                path.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Returns whether every block passed.
fn gradcheck(seeds: u64) -> Result<bool> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let results = gradsuite::run(&seeds);
    println!(
        "{:<22} {:>5} {:>8} {:>12}  status",
        "block", "seeds", "checked", "max rel err"
    );
    let mut all = true;
    for b in &results {
        let status = match &b.error {
            Some(e) => format!("ERROR {e}"),
            None if b.passed() => "ok".into(),
            None => "FAIL".into(),
        };
        all &= b.passed();
        println!(
            "{:<22} {:>5} {:>8} {:>12.3e}  {status}",
            b.name, b.seeds, b.report.checked, b.report.max_rel_err
        );
    }
    let worst = results
        .iter()
        .map(|b| b.report.max_rel_err)
        .fold(0.0, f64::max);
    println!(
        "{} blocks, worst relative error {worst:.3e} (tolerance {:.0e}): {}",
        results.len(),
        gradsuite::TOLERANCE,
        if all { "pass" } else { "FAIL" }
    );
    Ok(all)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CRT_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("CRT_THREADS must be a positive integer, got `{v}`"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Synth { train, eval } => synth(g, train, eval)?,
        Command::Train {
            data,
            resume,
            max_iters,
        } => train_cmd(g, data, resume, max_iters)?,
        Command::Eval {
            gt,
            pred,
            num_classes,
        } => eval_cmd(g, &gt, &pred, num_classes)?,
        Command::Infer {
            checkpoint,
            images,
            output,
            conf,
        } => infer(g, &checkpoint, &images, output, conf)?,
        Command::Gradcheck { seeds } => {
            if !gradcheck(seeds)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
