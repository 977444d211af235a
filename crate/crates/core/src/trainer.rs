//! Losses, the AdamW optimizer and the training loop.
//!
//! Every random choice of a run derives from the run seed: batch `t` is
//! the `t`-th block of `batch_size` positions in the concatenation of
//! per-epoch frame permutations, and step `t` draws crops and draw orders
//! from its own RNG stream. A run resumed from a checkpoint therefore
//! continues exactly like an uninterrupted one.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::compositor::estimate_background_color;
use crate::config::{BackgroundMode, RunConfig, TrainConfig};
use crate::dataset::{crop_offset, Frame};
use crate::error::{Error, Result};
use crate::evaluation::psnr_from_mse;
use crate::model::{BackgroundInit, DrawOrder, SpriteModel};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Clamp applied inside the beta prior's logarithms, about 1e-6. A power
/// of two, so `1 - PRIOR_EPS` is exact and the prior is exactly symmetric
/// at the clamp boundaries.
pub const PRIOR_EPS: f64 = 1.0 / (1u64 << 20) as f64;

const EPOCH_STREAM_SALT: u64 = 0x5eed_e90c;
const BACKGROUND_STREAM_SALT: u64 = 0xb6_c010;

/// Mean squared error against `target`.
pub fn reconstruction_loss(g: &mut Graph<'_>, pred: Var, target: &Tensor) -> Var {
    g.mse(pred, target)
}

/// Beta(0.5, 0.5) negative log-likelihood averaged over every entry of
/// `vars` (up to its normalising constant). Low at 0 and 1, highest at 0.5.
pub fn beta_prior_loss(g: &mut Graph<'_>, vars: &[Var]) -> Var {
    let total: usize = vars.iter().map(|&v| g.value(v).len()).sum();
    let mut acc: Option<Var> = None;
    for &v in vars {
        let weight = g.value(v).len() as f64 / total as f64;
        let term = g.beta_prior(v, PRIOR_EPS);
        let term = g.scale(term, weight);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub switch: f64,
    pub score: f64,
    pub offset: f64,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub total: f64,
    pub l2: f64,
    pub priors: Priors,
    /// PSNR of the soft reconstruction of this step's batch.
    pub psnr_sample: f64,
}

/// AdamW with decoupled weight decay. Moments are kept per parameter in
/// store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. Network weights decay; latents and the
    /// background do not, and the background uses its own learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        for (id, grad) in grads {
            let i = id.index();
            let entry = &mut store.entries_mut()[i];
            let (lr, decay) = match entry.group {
                ParamGroup::Network => (cfg.learning_rate, cfg.weight_decay),
                ParamGroup::Latent => (cfg.learning_rate, 0.0),
                ParamGroup::Background => (cfg.background_learning_rate, 0.0),
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in entry.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *p *= 1.0 - lr * decay;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Training frames plus the crop drawn from each of them per step.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub frames: Vec<Frame>,
    /// `(width, height)`; `None` uses whole frames.
    pub crop: Option<(usize, usize)>,
}

impl TrainingSet {
    pub fn new(frames: Vec<Frame>, crop: Option<(usize, usize)>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        Ok(Self { frames, crop })
    }
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EPOCH_STREAM_SALT);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Frame indices of batch `step`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = step * batch as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (start..start + batch as u64)
        .map(|pos| {
            let epoch = pos / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_permutation(n, seed, epoch)));
            }
            cached.as_ref().expect("just filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// RNG used for crops and draw orders at `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Builds a model for a run: estimates the background colour from the
/// frames and initialises every parameter from the run seed.
pub fn prepare_model(run: &RunConfig, frames: &[Frame]) -> Result<SpriteModel> {
    run.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ BACKGROUND_STREAM_SALT);
    let color = estimate_background_color(frames, &mut rng)?;
    let init = match run.model.background {
        BackgroundMode::Solid => BackgroundInit::Solid(color),
        BackgroundMode::Texture => BackgroundInit::Texture { frames: frames.len(), color },
    };
    SpriteModel::new(run.model.clone(), init, run.train.seed)
}

pub struct Trainer {
    pub model: SpriteModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed updates.
    pub step: u64,
}

fn check_finite(step: u64, term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, term: term.into() })
    }
}

/// Nodes of the training objective on one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l2: Var,
    pub switch: Var,
    pub score: Var,
    pub offset: Var,
}

/// Builds `l2 + prior_weight * (switch + score + offset priors)` for `batch`
/// with random draw order from `rng`.
pub fn training_loss<R: Rng + ?Sized>(
    model: &SpriteModel,
    g: &mut Graph<'_>,
    batch: &[Frame],
    prior_weight: f64,
    rng: &mut R,
) -> Result<LossTerms> {
    let fwd = model.forward_soft(g, batch, DrawOrder::Random, rng)?;
    let target =
        Tensor::new(g.shape(fwd.reconstruction), batch.iter().flat_map(|f| f.data().iter().copied()).collect());
    let l2 = reconstruction_loss(g, fwd.reconstruction, &target);
    let switches: Vec<Var> = fwd.layers.iter().map(|l| l.switches).collect();
    let scores: Vec<Var> = fwd.layers.iter().map(|l| l.scores).collect();
    let offsets: Vec<Var> = fwd.layers.iter().flat_map(|l| [l.px, l.py]).collect();
    let switch = beta_prior_loss(g, &switches);
    let score = beta_prior_loss(g, &scores);
    let offset = beta_prior_loss(g, &offsets);
    let priors = g.add(switch, score);
    let priors = g.add(priors, offset);
    let priors = g.scale(priors, prior_weight);
    let total = g.add(l2, priors);
    Ok(LossTerms { total, l2, switch, score, offset })
}

impl Trainer {
    pub fn new(model: SpriteModel, config: TrainConfig) -> Self {
        let optimizer = AdamW::new(&model.store);
        Self { model, optimizer, config, step: 0 }
    }

    /// Batch of step `self.step`, cropped if the set asks for it.
    pub fn batch(&self, data: &TrainingSet, rng: &mut ChaCha8Rng) -> Result<Vec<Frame>> {
        let idx = batch_indices(data.frames.len(), self.config.batch_size, self.config.seed, self.step);
        idx.into_iter()
            .map(|i| {
                let f = &data.frames[i];
                match data.crop {
                    Some((cw, ch)) => {
                        let (x, y) = crop_offset(f.width(), f.height(), cw, ch, rng)?;
                        f.crop(x, y, cw, ch)
                    }
                    None => Ok(f.clone()),
                }
            })
            .collect()
    }

    /// Forward, backward and one optimizer update on `batch`.
    ///
    /// Nothing is updated when any loss term or gradient is non-finite.
    pub fn step_on(&mut self, batch: &[Frame], rng: &mut ChaCha8Rng) -> Result<StepReport> {
        let step = self.step + 1;
        let (report, grads) = {
            let model = &self.model;
            let mut g = Graph::new(&model.store);
            let terms = training_loss(model, &mut g, batch, self.config.prior_weight, rng)?;
            let value = |v: Var| g.value(v).item();
            let report = StepReport {
                step,
                total: value(terms.total),
                l2: value(terms.l2),
                priors: Priors { switch: value(terms.switch), score: value(terms.score), offset: value(terms.offset) },
                psnr_sample: psnr_from_mse(value(terms.l2)),
            };
            check_finite(step, "reconstruction loss", report.l2)?;
            check_finite(step, "switch prior", report.priors.switch)?;
            check_finite(step, "score prior", report.priors.score)?;
            check_finite(step, "offset prior", report.priors.offset)?;
            check_finite(step, "total loss", report.total)?;
            let grads = g.backward(terms.total).param_grads(&model.store);
            if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                let name = &model.store.entry(*id).name;
                return Err(Error::Diverged { step, term: format!("gradient of {name}") });
            }
            (report, grads)
        };
        self.optimizer.step(&mut self.model.store, &grads, &self.config);
        self.step = step;
        Ok(report)
    }

    /// One training step on the scheduled batch.
    pub fn train_step(&mut self, data: &TrainingSet) -> Result<StepReport> {
        let mut rng = step_rng(self.config.seed, self.step);
        let batch = self.batch(data, &mut rng)?;
        self.step_on(&batch, &mut rng)
    }
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.sfck";
pub const LOG_FILE: &str = "log.jsonl";

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }
}

/// Trains until `trainer.config.steps` updates have been made, appending
/// log lines and writing checkpoints into `paths.dir`. `on_step` sees
/// every step's report.
pub fn run_training(
    trainer: &mut Trainer,
    data: &TrainingSet,
    paths: &RunPaths,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    std::fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let log_path = paths.log();
    // Keep only log lines the trainer's state already covers, so a resumed
    // run ends with the same log as an uninterrupted one.
    // Lines are kept verbatim; re-serializing parsed floats could change
    // their last digit.
    let mut kept = String::new();
    if trainer.step > 0 && log_path.exists() {
        let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let report: StepReport = serde_json::from_str(line)?;
            if report.step <= trainer.step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    let mut log = create_file(&log_path)?;
    log.write_all(kept.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
    let cfg = trainer.config.clone();
    while trainer.step < cfg.steps {
        let report = trainer.train_step(data)?;
        on_step(&report);
        if report.step % cfg.log_every == 0 || report.step == 1 || report.step == cfg.steps {
            serde_json::to_writer(&mut log, &report)?;
            log.write_all(b"\n").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        }
        if cfg.checkpoint_every > 0 && report.step % cfg.checkpoint_every == 0 {
            crate::checkpoint::save(trainer, &paths.checkpoint())?;
        }
    }
    crate::checkpoint::save(trainer, &paths.checkpoint())
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<StepReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Opens `path` for writing, creating parent directories.
pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}
