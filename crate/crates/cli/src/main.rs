//! `sdg`: generate the synthetic dataset, train the crop classifier and run the
//! evaluation harness.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sdg_core::annotate::{read_manifest, ManifestRecord, Split, MANIFEST_FILE};
use sdg_core::config::{parse_config, ConfigError, RunConfig};
use sdg_core::harness::{generate_pseudo_real, run_grid, write_report, EvalPool};
use sdg_core::learner::{load_model, predict_patch, save_model, train_patches};
use sdg_core::metrics::{confusion, load_detection_set, map_range, report};
use sdg_core::pipeline::{generate_synthetic, load_patches, with_workers, BackgroundLibrary, SyntheticJob};
use sdg_core::scene::Scene;
use sdg_core::Label;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const EXIT_MISSING_FILE: u8 = 3;
const EXIT_SCHEMA: u8 = 4;
const EXIT_INVALID: u8 = 5;
const EXIT_IO: u8 = 6;
const EXIT_STAGE: u8 = 7;

const SYNTHETIC_DIR: &str = "synthetic";
const PSEUDO_REAL_DIR: &str = "pseudo_real";
const MODEL_DIR: &str = "model";
const MODEL_FILE: &str = "sdg.bin";
const EVAL_DIR: &str = "eval";
const EXPERIMENT_DIR: &str = "experiment";

#[derive(Parser, Debug)]
#[command(name = "sdg", version, about = "Synthetic training data for bent-bracket inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); the shipped default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Generation threads (0 = all cores); output is identical for any value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shrinks every stage to a 20-image smoke run.
    #[arg(long, global = true)]
    micro: bool,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Render and write the synthetic dataset.
    Generate,
    /// Render the held-out pseudo-real evaluation set.
    PseudoReal,
    /// Train the crop classifier on the synthetic train split.
    Train,
    /// Classification report against a manifest.
    EvalClassify {
        /// Lines of `<plan_id> <pass|fail> [probability]`; the trained model is used when omitted.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Manifest to score against (default: the pseudo-real set).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Detection metrics for YOLO prediction files named `<plan_id>.txt`.
    EvalDetect {
        #[arg(long)]
        predictions: PathBuf,
        /// Manifest with ground truth (default: the synthetic set).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Split to evaluate.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Zero-shot evaluation and the few-shot grid on the pseudo-real set.
    Experiment,
    /// generate, pseudo-real, train and experiment in sequence.
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::PseudoReal => "pseudo-real",
            Command::Train => "train",
            Command::EvalClassify { .. } => "eval-classify",
            Command::EvalDetect { .. } => "eval-detect",
            Command::Experiment => "experiment",
            Command::All => "all",
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn scene(&self) -> Result<Scene> {
        Ok(Scene::new(self.cfg.scene.clone())?)
    }

    fn backgrounds(&self, ids: &[u32]) -> Result<BackgroundLibrary> {
        let size = self.cfg.scene.canvas_size;
        let seed = self.cfg.stream_seeds().backgrounds;
        let lib = match &self.cfg.background_dir {
            Some(dir) => BackgroundLibrary::from_dir(dir, ids, size)?,
            None => with_workers(self.workers, || BackgroundLibrary::procedural(ids, seed, size))?,
        };
        Ok(lib)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest_of(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        bail!("{} not found; run the stage that produces it first", path.display());
    }
    Ok(read_manifest(&path)?)
}

fn stage_generate(ctx: &Ctx) -> Result<Value> {
    let root = ctx.dir(SYNTHETIC_DIR);
    let scene = ctx.scene()?;
    let backgrounds = ctx.backgrounds(&ctx.cfg.doe.background_ids)?;
    let job = SyntheticJob {
        doe: &ctx.cfg.doe,
        scene: &scene,
        backgrounds: &backgrounds,
        val_fraction: ctx.cfg.val_fraction,
        split_seed: ctx.cfg.stream_seeds().split,
    };
    let out = with_workers(ctx.workers, || generate_synthetic(&root, &job))??;
    let composite_configs = out.part_configs * ctx.cfg.doe.background_ids.len() * ctx.cfg.doe.exposure_levels.len();
    println!(
        "generate: {} images ({} pass / {} fail) from {} part configs and {} composite configs -> {}",
        out.summary.total,
        out.summary.count(Label::Pass),
        out.summary.count(Label::Fail),
        out.part_configs,
        composite_configs,
        root.display()
    );
    let detail = json!({
        "images": out.summary.total,
        "pass": out.summary.count(Label::Pass),
        "fail": out.summary.count(Label::Fail),
        "part_configs": out.part_configs,
        "composite_configs": composite_configs,
        "planned": out.plans,
        "failures": out.outcome.failures,
        "per_split": out.summary.per_split,
    });
    if !out.outcome.failures.is_empty() {
        bail!("{} of {} plans failed (first: {:?})", out.outcome.failures.len(), out.plans, out.outcome.failures[0]);
    }
    Ok(detail)
}

fn stage_pseudo_real(ctx: &Ctx) -> Result<Value> {
    let root = ctx.dir(PSEUDO_REAL_DIR);
    let scene = ctx.scene()?;
    let backgrounds = ctx.backgrounds(&ctx.cfg.pseudo_real.background_ids)?;
    let out = with_workers(ctx.workers, || {
        generate_pseudo_real(&root, &ctx.cfg.pseudo_real, &ctx.cfg.doe, &scene, &backgrounds)
    })??;
    println!(
        "pseudo-real: {} images ({} pass / {} fail) -> {}",
        out.summary.total,
        out.summary.count(Label::Pass),
        out.summary.count(Label::Fail),
        root.display()
    );
    if !out.outcome.failures.is_empty() {
        bail!("{} pseudo-real plans failed (first: {:?})", out.outcome.failures.len(), out.outcome.failures[0]);
    }
    Ok(json!({
        "images": out.summary.total,
        "pass": out.summary.count(Label::Pass),
        "fail": out.summary.count(Label::Fail),
    }))
}

fn stage_train(ctx: &Ctx) -> Result<Value> {
    let root = ctx.dir(SYNTHETIC_DIR);
    let records = manifest_of(&root)?;
    let spec = &ctx.cfg.preprocess;
    let (train, val): (Vec<ManifestRecord>, Vec<ManifestRecord>) = records.into_iter().partition(|r| r.split == Split::Train);
    let patches = with_workers(ctx.workers, || load_patches(&root, &train, spec))??;
    let labels: Vec<Label> = train.iter().map(|r| r.label).collect();
    println!("train: {} crops, {} epochs, batch {}", patches.len(), ctx.cfg.train.epochs, ctx.cfg.train.batch_size);
    let outcome = train_patches(&patches, &labels, spec, &ctx.cfg.train)?;
    drop(patches);
    let model_path = ctx.dir(MODEL_DIR).join(MODEL_FILE);
    fs::create_dir_all(ctx.dir(MODEL_DIR))?;
    save_model(&model_path, &outcome.params, spec)?;
    let mut val_report = Value::Null;
    if !val.is_empty() {
        let val_patches = with_workers(ctx.workers, || load_patches(&root, &val, spec))??;
        let preds = val_patches
            .iter()
            .map(|p| predict_patch(&outcome.params, p, spec).map(|(l, _)| l))
            .collect::<Result<Vec<_>, _>>()?;
        let truths: Vec<Label> = val.iter().map(|r| r.label).collect();
        let r = report(&confusion(&preds, &truths)?)?;
        println!("train: validation accuracy {:.4}, balanced accuracy {:.4}", r.accuracy, r.balanced_accuracy);
        val_report = serde_json::to_value(&r)?;
    }
    let history = &outcome.loss_history;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("train: loss {first:.4} -> {last:.4}; model -> {}", model_path.display());
    }
    let detail = json!({
        "train_images": labels.len(),
        "val_images": val.len(),
        "loss_history": history,
        "validation": val_report,
        "model": model_path,
    });
    write_json(&ctx.dir(MODEL_DIR).join("training.json"), &detail)?;
    Ok(detail)
}

fn parse_predictions(path: &Path) -> Result<HashMap<u32, Label>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(id), Some(label)) = (fields.next(), fields.next()) else {
            bail!("{}:{}: expected `<plan_id> <label>`", path.display(), n + 1);
        };
        let id: u32 = id.parse().with_context(|| format!("{}:{}: bad plan id", path.display(), n + 1))?;
        let label: Label = label.parse().map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), n + 1))?;
        if out.insert(id, label).is_some() {
            bail!("{}:{}: duplicate plan id {id}", path.display(), n + 1);
        }
    }
    Ok(out)
}

fn stage_eval_classify(ctx: &Ctx, predictions: Option<&Path>, manifest: Option<&Path>) -> Result<Value> {
    let manifest_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| ctx.dir(PSEUDO_REAL_DIR).join(MANIFEST_FILE));
    let records = read_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let eval_dir = ctx.dir(EVAL_DIR);
    fs::create_dir_all(&eval_dir)?;
    let preds: Vec<Label> = match predictions {
        Some(path) => {
            let map = parse_predictions(path)?;
            records
                .iter()
                .map(|r| map.get(&r.plan_id).copied().with_context(|| format!("no prediction for plan {}", r.plan_id)))
                .collect::<Result<_>>()?
        }
        None => {
            let (params, crop) = load_model(&ctx.dir(MODEL_DIR).join(MODEL_FILE))?;
            let spec = sdg_core::learner::PreprocessSpec {
                crop_size: crop,
                ..ctx.cfg.preprocess.clone()
            };
            let patches = with_workers(ctx.workers, || load_patches(&root, &records, &spec))??;
            let scored = patches
                .iter()
                .map(|p| predict_patch(&params, p, &spec))
                .collect::<Result<Vec<_>, _>>()?;
            let lines: String = records
                .iter()
                .zip(&scored)
                .map(|(r, (l, p))| format!("{} {} {:.6}\n", r.plan_id, l, p))
                .collect();
            fs::write(eval_dir.join("predictions.txt"), lines)?;
            scored.into_iter().map(|(l, _)| l).collect()
        }
    };
    let truths: Vec<Label> = records.iter().map(|r| r.label).collect();
    let cm = confusion(&preds, &truths)?;
    let r = report(&cm)?;
    let table = r.to_table();
    println!("eval-classify: {} images from {}\n{table}", records.len(), manifest_path.display());
    fs::write(eval_dir.join("classification.txt"), &table)?;
    let detail = json!({ "manifest": manifest_path, "confusion": cm, "report": r });
    write_json(&eval_dir.join("classification.json"), &detail)?;
    Ok(detail)
}

fn stage_eval_detect(ctx: &Ctx, predictions: &Path, manifest: Option<&Path>, split: &str) -> Result<Value> {
    let manifest_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| ctx.dir(SYNTHETIC_DIR).join(MANIFEST_FILE));
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = read_manifest(&manifest_path)?;
    let gts: Vec<(String, PathBuf)> = records
        .iter()
        .filter(|r| r.split.as_str() == split)
        .map(|r| (format!("{:05}", r.plan_id), root.join(&r.label_path)))
        .collect();
    if gts.is_empty() {
        bail!("manifest {} has no `{split}` records", manifest_path.display());
    }
    let size = ctx.cfg.scene.canvas_size;
    let set = load_detection_set(&gts, predictions, size, size)?;
    let summary = map_range(&set)?;
    println!(
        "eval-detect: {} images, mAP@0.5 {:.4}, mAP@0.5:0.95 {:.4}, precision {:.4}, recall {:.4}",
        gts.len(),
        summary.map50,
        summary.map50_95,
        summary.precision,
        summary.recall
    );
    let detail = json!({ "images": gts.len(), "split": split, "summary": summary });
    write_json(&ctx.dir(EVAL_DIR).join("detection.json"), &detail)?;
    Ok(detail)
}

fn stage_experiment(ctx: &Ctx) -> Result<Value> {
    let root = ctx.dir(PSEUDO_REAL_DIR);
    let records = manifest_of(&root)?;
    let (params, crop) = load_model(&ctx.dir(MODEL_DIR).join(MODEL_FILE))?;
    if crop != ctx.cfg.preprocess.crop_size {
        bail!("model was trained on {crop}px crops but the configuration uses {}px", ctx.cfg.preprocess.crop_size);
    }
    let spec = &ctx.cfg.preprocess;
    let patches = with_workers(ctx.workers, || load_patches(&root, &records, spec))??;
    let pool = EvalPool::new(&records, patches, &params, spec)?;
    let zero_shot = report(&confusion(&pool.sdg_predictions, &pool.labels)?)?;
    println!(
        "experiment: zero-shot on {} pseudo-real images: accuracy {:.4}, balanced accuracy {:.4}",
        records.len(),
        zero_shot.accuracy,
        zero_shot.balanced_accuracy
    );
    let grid = with_workers(ctx.workers, || run_grid(&pool, &ctx.cfg.grid, spec, &ctx.cfg.train))??;
    let dir = ctx.dir(EXPERIMENT_DIR);
    write_report(&dir, &grid)?;
    write_json(&dir.join("zero_shot.json"), &zero_shot)?;
    println!("experiment: {:>5} {:>5} {:>8} {:>8} {:>8}", "pass", "fail", "SDG", "FS-Real", "diff");
    for c in &grid.cells {
        println!(
            "experiment: {:>5} {:>5} {:>8.4} {:>8.4} {:>+8.4}",
            c.n_pass, c.n_fail, c.sdg.balanced_accuracy.mean, c.fs_real.balanced_accuracy.mean, c.difference
        );
    }
    Ok(json!({
        "zero_shot_balanced_accuracy": zero_shot.balanced_accuracy,
        "zero_shot_accuracy": zero_shot.accuracy,
        "diagonal_sdg_average": grid.diagonal_sdg_average,
        "diagonal_fs_real_average": grid.diagonal_fs_real_average,
        "cells": grid.cells.len(),
        "report": dir.join(sdg_core::harness::REPORT_FILE),
    }))
}

fn run_stage(ctx: &Ctx, command: &Command) -> Result<Value> {
    match command {
        Command::Generate => stage_generate(ctx),
        Command::PseudoReal => stage_pseudo_real(ctx),
        Command::Train => stage_train(ctx),
        Command::EvalClassify { predictions, manifest } => stage_eval_classify(ctx, predictions.as_deref(), manifest.as_deref()),
        Command::EvalDetect {
            predictions,
            manifest,
            split,
        } => stage_eval_detect(ctx, predictions, manifest.as_deref(), split),
        Command::Experiment => stage_experiment(ctx),
        Command::All => unreachable!("expanded before dispatch"),
    }
}

fn config_exit_code(e: &ConfigError) -> u8 {
    match e {
        ConfigError::Missing(_) => EXIT_MISSING_FILE,
        ConfigError::Read { .. } => EXIT_IO,
        ConfigError::Parse(_) | ConfigError::Schema { .. } => EXIT_SCHEMA,
        ConfigError::Invalid(_) => EXIT_INVALID,
    }
}

fn stage_exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<std::io::Error>()) {
        EXIT_IO
    } else {
        EXIT_STAGE
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_master_seed(seed);
    }
    if cli.micro {
        cfg = cfg.micro();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(config_exit_code(&e));
        }
    };
    let ctx = Ctx {
        out: cfg.output_dir.clone(),
        workers: cfg.workers,
        cfg,
    };
    let stages: Vec<Command> = match &cli.command {
        Command::All => vec![Command::Generate, Command::PseudoReal, Command::Train, Command::Experiment],
        other => vec![other.clone()],
    };

    let mut records = Vec::new();
    let mut exit = 0u8;
    let mut error = None;
    for stage in &stages {
        let start = Instant::now();
        let result = run_stage(&ctx, stage);
        let seconds = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => {
                println!("{}: ok in {seconds:.1} s", stage.name());
                records.push(json!({ "name": stage.name(), "status": "ok", "seconds": seconds, "detail": detail }));
            }
            Err(e) => {
                eprintln!("error: {}: {e:#}", stage.name());
                exit = stage_exit_code(&e);
                records.push(json!({ "name": stage.name(), "status": "failed", "seconds": seconds, "error": format!("{e:#}") }));
                error = Some(format!("{}: {e:#}", stage.name()));
                break;
            }
        }
    }
    let run = json!({
        "tool": "sdg",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "config_hash": ctx.cfg.hash(),
        "master_seed": ctx.cfg.master_seed,
        "workers": ctx.workers,
        "micro": cli.micro,
        "status": if exit == 0 { "ok" } else { "failed" },
        "exit_code": exit,
        "partial_outputs": exit != 0 && !records.is_empty(),
        "error": error,
        "stages": records,
    });
    if let Err(e) = write_json(&ctx.out.join("run.json"), &run) {
        eprintln!("error: {e:#}");
        if exit == 0 {
            exit = EXIT_IO;
        }
    }
    ExitCode::from(exit)
}
