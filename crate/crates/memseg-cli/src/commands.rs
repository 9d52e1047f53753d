//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::Serialize;

use memseg::data::{
    generate_synthetic, load_clip, load_mask_pgm, save_mask_pgm, DatasetManifest,
    SegmentationMask, Split,
};
use memseg::eval::ConfusionMatrix;
use memseg::model::Model;
use memseg::pipeline::{ensemble as ensemble_op, multi_stage_infer, InferenceConfig, ProbabilityMap};
use memseg::train::Trainer;
use memseg::Tensor;

use crate::config::RunConfig;

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config (CLI flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let mut cfg = run.gen.unwrap_or_default();
    if let Some(v) = args.videos {
        cfg.n_videos = v;
    }
    if let Some(v) = args.frames {
        cfg.frames_per_video = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.train_fraction {
        cfg.train_fraction = v;
    }
    let seed = run.seed.unwrap_or(args.seed);
    let manifest = generate_synthetic(&args.out, seed, &cfg)?;
    println!(
        "wrote {} videos ({} train / {} val) to {}",
        manifest.videos.len(),
        manifest.split_videos(Split::Train).len(),
        manifest.split_videos(Split::Val).len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Model variant: baseline, decoder_a or decoder_b.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total optimization steps (overrides epochs).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    /// Resume from a trainer checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save an intermediate checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let manifest = DatasetManifest::load(&args.data)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut trainer = if let Some(resume) = &args.resume {
        Trainer::load_checkpoint(resume, &manifest)?
    } else {
        let seed = run.seed.unwrap_or(args.seed);
        let mut model_cfg = run.model.unwrap_or_default();
        model_cfg.k = manifest.k;
        if let Some(v) = args.embed_dim {
            model_cfg.embed_dim = v;
        }
        if let Some(v) = &args.variant {
            model_cfg.variant = v.parse()?;
        }
        let mut train_cfg = run.train.unwrap_or_default();
        train_cfg.seed = seed;
        if let Some(v) = args.steps {
            train_cfg.max_steps = Some(v);
        }
        if let Some(v) = args.epochs {
            train_cfg.epochs = v;
        }
        if let Some(v) = args.lr {
            train_cfg.lr = v;
        }
        if let Some(v) = args.batch_size {
            train_cfg.batch_size = v;
        }
        if let Some(v) = args.warmup_fraction {
            train_cfg.warmup_fraction = v;
        }
        let augment = run.augment.unwrap_or_default();
        let model = Model::init(model_cfg, seed)?;
        Trainer::new(model, &manifest, train_cfg, augment)?
    };

    let log_path = args.out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let total = trainer.total_steps;
    log::info!(
        "training {} for {} steps (from step {})",
        trainer.model.config.variant,
        total,
        trainer.step_index
    );
    while trainer.step_index < total {
        let record = trainer.step()?;
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;
        if record.step % 100 == 0 || record.step == total {
            log::info!("step {}/{} loss {:.4}", record.step, total, record.loss);
        }
        if let Some(every) = args.checkpoint_every {
            if record.step % every == 0 && record.step != total {
                trainer.save_checkpoint(&args.out.join(format!("ck_step{:06}.msck", record.step)))?;
            }
        }
    }
    let final_path = args.out.join("model_final.msck");
    trainer.save_checkpoint(&final_path)?;
    println!("trained {} steps; checkpoint at {}", total, final_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory; masks land in `<out>/<video>/<frame>_stage<k>.pgm`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset split to run on.
    #[arg(long, default_value = "val")]
    split: String,
    /// Extra re-prediction rounds guided by the previous stage's masks.
    #[arg(long, default_value_t = 0)]
    stages: usize,
    /// Comma-separated test-time scales (default: single scale 1.0).
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Also average over horizontally flipped inputs.
    #[arg(long, default_value_t = false)]
    flip: bool,
    /// Save final-stage probability maps (`<frame>_probs.mstf`).
    #[arg(long, default_value_t = false)]
    save_probs: bool,
    /// Videos processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(anyhow!(memseg::Error::Config(format!(
            "unknown split '{other}'"
        )))),
    }
}

pub fn infer(args: InferArgs) -> Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let manifest = DatasetManifest::load(&args.data)?;
    let model = Model::load(&args.checkpoint)?;
    let split = parse_split(&args.split)?;
    let mut infer_cfg = run.infer.unwrap_or_else(InferenceConfig::plain);
    if let Some(scales) = args.scales {
        infer_cfg.scales = scales;
    }
    if args.flip {
        infer_cfg.flip = true;
    }
    infer_cfg.stages = args.stages;
    infer_cfg.validate()?;

    let ids: Vec<String> = manifest
        .split_videos(split)
        .iter()
        .map(|v| v.id.clone())
        .collect();
    if ids.is_empty() {
        bail!(memseg::Error::Config(format!(
            "split {} has no videos",
            args.split
        )));
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let jobs = args.jobs.max(1).min(ids.len());
    let results: Vec<Result<(usize, usize)>> = run_per_video(jobs, &ids, |id| {
        let clip = load_clip(&manifest, id)?;
        let result = multi_stage_infer(&model, &clip, infer_cfg.stages, &infer_cfg)?;
        let dir = args.out.join(id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for round in &result.stages {
            for (frame, stage_mask) in round.iter().enumerate() {
                let path = dir.join(format!("{frame:04}_stage{}.pgm", stage_mask.stage));
                save_mask_pgm(&stage_mask.mask, &path)?;
            }
        }
        if args.save_probs {
            for (frame, probs) in result.final_probs.iter().enumerate() {
                probs
                    .tensor()
                    .save_mstf(&dir.join(format!("{frame:04}_probs.mstf")))?;
            }
        }
        let changed: usize = result.pixel_changes.iter().sum();
        Ok((clip.len(), changed))
    });

    let mut frames = 0usize;
    let mut changed = 0usize;
    for r in results {
        let (f, c) = r?;
        frames += f;
        changed += c;
    }
    println!(
        "inferred {} videos / {frames} frames (stages: {}, scales: {:?}, flip: {}); {changed} pixels changed across stages",
        ids.len(),
        infer_cfg.stages,
        infer_cfg.scales,
        infer_cfg.flip
    );
    Ok(())
}

/// Run `work` once per video id on `jobs` threads; results keep input order.
fn run_per_video<T: Send>(
    jobs: usize,
    ids: &[String],
    work: impl Fn(&str) -> Result<T> + Sync,
) -> Vec<Result<T>> {
    if jobs <= 1 {
        return ids.iter().map(|id| work(id)).collect();
    }
    let mut results: Vec<Option<Result<T>>> = (0..ids.len()).map(|_| None).collect();
    let slots: Vec<(usize, &String)> = ids.iter().enumerate().collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<(usize, &String)>> = (0..jobs)
            .map(|j| slots.iter().skip(j).step_by(jobs).cloned().collect())
            .collect();
        let mut handles = Vec::new();
        for chunk in chunks {
            let work = &work;
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|(i, id)| (i, work(id)))
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (i, result) in handle.join().expect("worker panicked") {
                results[i] = Some(result);
            }
        }
    });
    results.into_iter().map(|r| r.expect("slot filled")).collect()
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory of saved masks (the infer command's --out).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Highest stage to evaluate (default: every stage found on disk).
    #[arg(long)]
    stages: Option<usize>,
    /// Write the JSON report here (otherwise stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct StageReport {
    stage: usize,
    miou: f64,
    per_class_iou: Vec<Option<f64>>,
    pixel_acc: f64,
    pixels_changed_vs_prev: Option<usize>,
}

#[derive(Serialize)]
struct EvalReport {
    k: usize,
    split: String,
    stages: Vec<StageReport>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let split = parse_split(&args.split)?;
    let ids: Vec<String> = manifest
        .split_videos(split)
        .iter()
        .map(|v| v.id.clone())
        .collect();
    if ids.is_empty() {
        bail!(memseg::Error::Config(format!(
            "split {} has no videos",
            args.split
        )));
    }
    let max_stage = match args.stages {
        Some(s) => s,
        None => detect_stages(&args.pred, &ids[0])?,
    };

    let mut report = EvalReport {
        k: manifest.k,
        split: args.split.clone(),
        stages: Vec::new(),
    };
    let mut prev_masks: Option<Vec<SegmentationMask>> = None;
    for stage in 0..=max_stage {
        let mut cm = ConfusionMatrix::new(manifest.k);
        let mut masks = Vec::new();
        for id in &ids {
            let clip = load_clip(&manifest, id)?;
            for (frame, gt) in clip.masks.iter().enumerate() {
                let path = args
                    .pred
                    .join(id)
                    .join(format!("{frame:04}_stage{stage}.pgm"));
                let pred = load_mask_pgm(&path)?;
                if pred.height() != gt.height() || pred.width() != gt.width() {
                    bail!(memseg::Error::Input(format!(
                        "{}: prediction {}×{} vs ground truth {}×{}",
                        path.display(),
                        pred.height(),
                        pred.width(),
                        gt.height(),
                        gt.width()
                    )));
                }
                cm.accumulate(&pred, gt)?;
                masks.push(pred);
            }
        }
        let changed = prev_masks.as_ref().map(|prev| {
            prev.iter()
                .zip(&masks)
                .map(|(a, b)| a.disagreement(b).expect("same dims"))
                .sum()
        });
        let metrics = cm.report();
        report.stages.push(StageReport {
            stage,
            miou: metrics.miou,
            per_class_iou: metrics.per_class_iou,
            pixel_acc: metrics.pixel_acc,
            pixels_changed_vs_prev: changed,
        });
        prev_masks = Some(masks);
    }

    // aligned text table
    println!("{:<7} {:<9} {:<9} {:<9}", "stage", "mIoU", "pixAcc", "Δpixels");
    for s in &report.stages {
        println!(
            "{:<7} {:<9.4} {:<9.4} {:<9}",
            s.stage,
            s.miou,
            s.pixel_acc,
            s.pixels_changed_vs_prev
                .map_or("-".to_string(), |c| c.to_string())
        );
    }
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    Ok(())
}

/// Highest stage index for which the first video has a complete mask set.
fn detect_stages(pred: &Path, first_id: &str) -> Result<usize> {
    let dir = pred.join(first_id);
    let mut stage = 0usize;
    while dir.join(format!("0000_stage{}.pgm", stage + 1)).exists() {
        stage += 1;
    }
    if !dir.join("0000_stage0.pgm").exists() {
        bail!(memseg::Error::Input(format!(
            "no stage-0 masks under {}",
            dir.display()
        )));
    }
    Ok(stage)
}

// ---------------------------------------------------------------------------
// ensemble
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EnsembleArgs {
    /// Probability maps of the first model (infer --save-probs output).
    #[arg(long)]
    a: PathBuf,
    /// Probability maps of the second model.
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for ensembled masks (saved as stage-0 masks).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Also print mIoU of the ensembled masks.
    #[arg(long, default_value_t = false)]
    eval: bool,
}

pub fn ensemble(args: EnsembleArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let split = parse_split(&args.split)?;
    let ids: Vec<String> = manifest
        .split_videos(split)
        .iter()
        .map(|v| v.id.clone())
        .collect();
    let mut cm = ConfusionMatrix::new(manifest.k);
    let mut frames = 0usize;
    for id in &ids {
        let clip = load_clip(&manifest, id)?;
        let dir = args.out.join(id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (frame, gt) in clip.masks.iter().enumerate() {
            let load = |root: &Path| -> Result<ProbabilityMap> {
                let path = root.join(id).join(format!("{frame:04}_probs.mstf"));
                let tensor = Tensor::load_mstf(&path)?;
                Ok(ProbabilityMap::new(tensor)?)
            };
            let pa = load(&args.a)?;
            let pb = load(&args.b)?;
            if pa.tensor().shape() != pb.tensor().shape() {
                bail!(memseg::Error::Input(format!(
                    "{id} frame {frame}: probability shapes {:?} vs {:?}",
                    pa.tensor().shape(),
                    pb.tensor().shape()
                )));
            }
            let mask = ensemble_op(&pa, &pb)?;
            save_mask_pgm(&mask, &dir.join(format!("{frame:04}_stage0.pgm")))?;
            if args.eval {
                cm.accumulate(&mask, gt)?;
            }
            frames += 1;
        }
    }
    println!("ensembled {frames} frames into {}", args.out.display());
    if args.eval {
        println!("ensemble mIoU {:.4} pixAcc {:.4}", cm.miou(), cm.pixel_acc());
    }
    Ok(())
}
