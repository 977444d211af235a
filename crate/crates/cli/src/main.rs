use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use spritefactor::checkpoint::{self, check_compatible};
use spritefactor::dataset::{
    generate_floating_sprites, load_dataset, load_truth, render_scene, synthetic_rng, write_synthetic, Frame,
    GroundTruth, LoadedDataset, SyntheticConfig,
};
use spritefactor::evaluation::{
    evaluate, psnr, segment_by_sprites, sprite_instances, EvaluationReport, FrameEvaluation, Mask,
};
use spritefactor::export::export_decomposition;
use spritefactor::image_io::write_rgb;
use spritefactor::model::SpriteModel;
use spritefactor::trainer::{prepare_model, run_training, RunPaths, Trainer, TrainingSet};

mod options;
mod serve;

use options::{cache_dir, describe, ensure_dir, parse_ids, CheckpointArgs, ConfigArgs};

#[derive(Parser, Debug)]
#[command(
    name = "spritefactor",
    version,
    about = "Learn a sprite dictionary from frames and decompose them into placed sprites"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Render hard reconstructions and report their PSNR.
    Reconstruct(ReconstructArgs),
    /// Write an editable decomposition package (atlas, manifest, frames).
    Export(ExportArgs),
    /// Write per-frame masks covering the chosen dictionary sprites.
    Segment(SegmentArgs),
    /// Score decompositions against ground truth and write a JSON report.
    Eval(EvalArgs),
    /// Generate the floating-sprites dataset with ground truth.
    Synth(SynthArgs),
    /// Serve a package directory over HTTP for the editor.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    background_learning_rate: Option<f64>,
    /// Weight of the binarizing priors.
    #[arg(long)]
    prior_weight: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_name = "STEPS")]
    checkpoint_every: Option<u64>,
    #[arg(long, value_name = "STEPS")]
    log_every: Option<u64>,
    /// Run directory for checkpoint and log [default: $SPRITEFACTOR_CACHE].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// Output directory for `recon_%05d.png` and `summary.json`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// Package directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// Comma-separated dictionary ids, e.g. `3,7,12`; none gives empty masks.
    #[arg(long, value_name = "IDS", default_value = "")]
    sprites: String,
    /// Output directory for `mask_%05d.png`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// Score a synthetic-format directory (`truth.json` + sprites) as the
    /// prediction instead of a checkpoint.
    #[arg(long, value_name = "DIR", conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    /// IoU threshold for instance matching.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Report file; the report is always printed too.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    sprite_size: usize,
    /// Distinct sprites used.
    #[arg(long, default_value_t = 3)]
    kinds: usize,
    #[arg(long, default_value_t = 5)]
    min_instances: usize,
    #[arg(long, default_value_t = 15)]
    max_instances: usize,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Package directory to serve.
    #[arg(long, value_name = "DIR", default_value = ".")]
    dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Port; 0 picks a free one.
    #[arg(long, default_value_t = 8000)]
    port: u16,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Export(a) => export(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve::serve(&a.dir, &a.host, a.port),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

/// Configuration problems exit with 2 like usage errors; everything else
/// with 1.
fn exit_code(err: &anyhow::Error) -> ExitCode {
    use spritefactor::Error;
    let usage = err
        .chain()
        .filter_map(|e| e.downcast_ref::<Error>())
        .any(|e| matches!(e, Error::Config { .. } | Error::Shape(_)));
    ExitCode::from(if usage { 2 } else { 1 })
}

fn train(args: TrainArgs) -> Result<()> {
    let mut run = args.config.run_config()?;
    let t = &mut run.train;
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = args.$field {
                t.$field = v;
            }
        };
    }
    set!(steps);
    set!(batch_size);
    set!(learning_rate);
    set!(background_learning_rate);
    set!(prior_weight);
    set!(weight_decay);
    set!(checkpoint_every);
    set!(log_every);
    run.validate()?;
    println!("{}", describe(&run));

    let data = load_dataset(&run.dataset, run.model.frame_width, run.model.frame_height, run.train.seed)?;
    let paths = RunPaths::new(args.out.unwrap_or_else(cache_dir));
    let mut trainer = if args.resume && paths.checkpoint().exists() {
        let mut t = checkpoint::load_for_resume(&paths.checkpoint(), &run.model)?;
        println!("resuming from step {}", t.step);
        t.config.steps = run.train.steps;
        t
    } else {
        Trainer::new(prepare_model(&run, &data.frames)?, run.train.clone())
    };
    ensure_dir(&paths.dir)?;
    let echo = paths.dir.join("run.json");
    std::fs::write(&echo, serde_json::to_string_pretty(&run)? + "\n")
        .with_context(|| format!("writing {}", echo.display()))?;

    let set = TrainingSet::new(data.frames, data.crop)?;
    let every = trainer.config.log_every.max(1);
    let steps = trainer.config.steps;
    let mut last = None;
    run_training(&mut trainer, &set, &paths, |r| {
        if r.step % every == 0 || r.step == 1 || r.step == steps {
            println!("step {} loss {:.6} l2 {:.6} psnr {:.2}", r.step, r.total, r.l2, r.psnr_sample);
        }
        last = Some(r.total);
    })?;
    match last {
        Some(loss) => println!("final loss {loss}"),
        None => println!("nothing to do: already at step {}", trainer.step),
    }
    println!("checkpoint {}", paths.checkpoint().display());
    Ok(())
}

/// Model from a checkpoint plus the frames to run it on.
fn load_for_inference(cfg: &ConfigArgs, ckpt: &CheckpointArgs) -> Result<(SpriteModel, LoadedDataset)> {
    let path = ckpt.path();
    let trainer = checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = trainer.model;
    let mut run = cfg.run_config()?;
    if cfg.constrains_model() {
        let mut requested = if cfg.config.is_some() { run.model.clone() } else { model.config.clone() };
        cfg.apply_model(&mut requested);
        check_compatible(&model.config, &requested, &path)?;
    }
    run.model = model.config.clone();
    if cfg.seed.is_none() && cfg.config.is_none() {
        run.train.seed = trainer.config.seed;
    }
    if run.dataset.source.is_none() {
        bail!(spritefactor::Error::config("dataset.source", "pass --dataset (frame directory, image or synthetic)"));
    }
    let data = load_dataset(&run.dataset, model.config.frame_width, model.config.frame_height, run.train.seed)?;
    if data.crop.is_some() {
        let f = &data.frames[0];
        bail!(spritefactor::Error::Shape(format!(
            "frames are {}x{} but the model takes {}x{}",
            f.width(),
            f.height(),
            model.config.frame_width,
            model.config.frame_height
        )));
    }
    Ok((model, data))
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let (model, data) = load_for_inference(&args.config, &args.checkpoint)?;
    ensure_dir(&args.out)?;
    let recon = model.reconstruct(&data.frames)?;
    let mut rows = Vec::with_capacity(recon.len());
    let mut total = 0.0;
    for (frame, r) in data.frames.iter().zip(&recon) {
        r.save(&args.out.join(format!("recon_{:05}.png", frame.index)))?;
        let p = psnr(frame, r)?;
        total += p;
        rows.push(json!({ "index": frame.index, "psnr": p }));
    }
    let mean = total / recon.len() as f64;
    let summary = json!({ "frames": rows, "mean_psnr": mean });
    let path = args.out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("reconstructed {} frames, mean PSNR {mean:.2} dB", recon.len());
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let (model, data) = load_for_inference(&args.config, &args.checkpoint)?;
    let package = export_decomposition(&model, &data.frames, &args.out)
        .with_context(|| format!("exporting to {}", args.out.display()))?;
    let placements: usize = package.manifest.frames.iter().map(|f| f.placements.len()).sum();
    println!(
        "exported {} frames, {} placements, {} sprites to {}",
        package.manifest.frames.len(),
        placements,
        package.sprites.len(),
        args.out.display()
    );
    Ok(())
}

fn segment(args: SegmentArgs) -> Result<()> {
    let ids = parse_ids(&args.sprites)?;
    let (model, data) = load_for_inference(&args.config, &args.checkpoint)?;
    let (sprites, _) = model.quantized_assets()?;
    if let Some(&id) = ids.iter().find(|&&id| id >= sprites.len()) {
        bail!(spritefactor::Error::UnknownSprite { id, count: sprites.len() });
    }
    ensure_dir(&args.out)?;
    let decompositions = model.decompose(&data.frames)?;
    let mut covered = 0;
    for d in &decompositions {
        let mask = segment_by_sprites(d, &model.layout, &sprites, &ids)?;
        covered += mask.count();
        let values: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let rgb: Vec<f64> = values.iter().chain(&values).chain(&values).copied().collect();
        write_rgb(&args.out.join(format!("mask_{:05}.png", d.frame_index)), d.width, d.height, &rgb)?;
    }
    println!("wrote {} masks covering {covered} pixels in total", decompositions.len());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let report = match &args.predictions {
        Some(dir) => eval_predictions(&args.config, dir, args.tau)?,
        None => eval_checkpoint(&args.config, &args.checkpoint, args.tau)?,
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(path) = &args.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn require_truth(truth: Option<GroundTruth>, frames: usize) -> Result<GroundTruth> {
    let truth = truth.context("the dataset has no ground truth (expected a truth.json next to the frames)")?;
    if truth.frames.len() != frames {
        bail!("truth.json describes {} frames, the dataset has {frames}", truth.frames.len());
    }
    Ok(truth)
}

fn eval_checkpoint(cfg: &ConfigArgs, ckpt: &CheckpointArgs, tau: f64) -> Result<EvaluationReport> {
    let (model, data) = load_for_inference(cfg, ckpt)?;
    let truth = require_truth(data.truth, data.frames.len())?;
    let recon = model.reconstruct(&data.frames)?;
    let decompositions = model.decompose(&data.frames)?;
    let (sprites, _) = model.quantized_assets()?;
    let all: Vec<usize> = (0..sprites.len()).collect();
    let predicted: Vec<_> = decompositions
        .iter()
        .map(|d| sprite_instances(d, &model.layout, &sprites, &all))
        .collect::<spritefactor::Result<_>>()?;
    score(&data.frames, &recon, &predicted, &truth, tau)
}

fn eval_predictions(cfg: &ConfigArgs, dir: &Path, tau: f64) -> Result<EvaluationReport> {
    let run = cfg.run_config()?;
    let pred = load_truth(dir)?;
    let data = load_dataset(&run.dataset, pred.width, pred.height, run.train.seed)?;
    let truth = require_truth(data.truth, data.frames.len())?;
    if pred.frames.len() != data.frames.len() {
        bail!("{} predicts {} frames, the dataset has {}", dir.display(), pred.frames.len(), data.frames.len());
    }
    let recon: Vec<Frame> = pred
        .frames
        .iter()
        .map(|inst| render_scene(&pred.sprites, inst, pred.width, pred.height))
        .collect::<spritefactor::Result<_>>()?;
    let predicted: Vec<_> = (0..pred.frames.len()).map(|i| pred.masks(i)).collect::<spritefactor::Result<_>>()?;
    score(&data.frames, &recon, &predicted, &truth, tau)
}

fn score(
    frames: &[Frame],
    recon: &[Frame],
    predicted: &[Vec<Mask>],
    truth: &GroundTruth,
    tau: f64,
) -> Result<EvaluationReport> {
    let truth_masks: Vec<_> = (0..frames.len()).map(|i| truth.masks(i)).collect::<spritefactor::Result<_>>()?;
    let items: Vec<FrameEvaluation<'_>> = (0..frames.len())
        .map(|i| FrameEvaluation {
            frame: &frames[i],
            reconstruction: &recon[i],
            predicted: &predicted[i],
            truth: &truth_masks[i],
        })
        .collect();
    Ok(evaluate(&items, tau)?)
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        frames: args.frames,
        width: args.width,
        height: args.height,
        sprite_size: args.sprite_size,
        sprite_kinds: args.kinds,
        min_instances: args.min_instances,
        max_instances: args.max_instances,
    };
    let (bank, scenes) = generate_floating_sprites(&cfg, &mut synthetic_rng(args.seed))?;
    write_synthetic(&args.out, &bank, &scenes)?;
    let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
    println!("wrote {} frames with {instances} sprite instances to {}", scenes.len(), args.out.display());
    Ok(())
}
