//! Flag definitions shared by several commands and their merge into a
//! [`RunConfig`]: flags override the config file, which overrides defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use spritefactor::config::{BackgroundMode, DatasetSource, ModelConfig, RunConfig};
use spritefactor::dataset::SyntheticConfig;
use spritefactor::trainer::CHECKPOINT_FILE;

pub const CACHE_ENV: &str = "SPRITEFACTOR_CACHE";
const DEFAULT_CACHE: &str = ".spritefactor";

/// Directory holding checkpoints when no explicit location is given.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackgroundArg {
    Solid,
    Texture,
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML or JSON run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Frame directory, single image, or `synthetic`.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<String>,
    /// Number of frames when generating a synthetic dataset.
    #[arg(long, value_name = "N")]
    pub synthetic_frames: Option<usize>,
    /// Seed for every random choice (initialisation, batches, synthetic data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sprite size in pixels (power of two).
    #[arg(long)]
    pub k: Option<usize>,
    /// Dictionary size.
    #[arg(long)]
    pub m: Option<usize>,
    /// Latent and feature dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of sprite layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Model input width in pixels.
    #[arg(long, value_name = "PX")]
    pub frame_width: Option<usize>,
    /// Model input height in pixels.
    #[arg(long, value_name = "PX")]
    pub frame_height: Option<usize>,
    #[arg(long, value_enum)]
    pub background: Option<BackgroundArg>,
}

impl ConfigArgs {
    /// Config file (or defaults) with the flags applied. Not validated.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        self.apply_model(&mut run.model);
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        if let Some(d) = &self.dataset {
            run.dataset.source = Some(dataset_source(d, &run.model));
        }
        if let Some(n) = self.synthetic_frames {
            match &mut run.dataset.source {
                Some(DatasetSource::Synthetic(cfg)) => cfg.frames = n,
                _ => anyhow::bail!("--synthetic-frames needs a synthetic dataset"),
            }
        }
        Ok(run)
    }

    pub fn apply_model(&self, model: &mut ModelConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut model.k, self.k);
        set(&mut model.m, self.m);
        set(&mut model.d, self.d);
        set(&mut model.layers, self.layers);
        set(&mut model.frame_width, self.frame_width);
        set(&mut model.frame_height, self.frame_height);
        if let Some(b) = self.background {
            model.background = match b {
                BackgroundArg::Solid => BackgroundMode::Solid,
                BackgroundArg::Texture => BackgroundMode::Texture,
            };
        }
    }

    /// Whether any model-shaping input was given, in which case it must
    /// agree with a loaded checkpoint.
    pub fn constrains_model(&self) -> bool {
        self.config.is_some()
            || [self.k, self.m, self.d, self.layers, self.frame_width, self.frame_height].iter().any(Option::is_some)
            || self.background.is_some()
    }
}

/// `synthetic` generates frames at the model's input size; existing
/// directories are frame sequences and anything else is read as an image
/// (missing paths are reported when the dataset is loaded).
fn dataset_source(arg: &str, model: &ModelConfig) -> DatasetSource {
    if arg == "synthetic" {
        return DatasetSource::Synthetic(SyntheticConfig {
            width: model.frame_width,
            height: model.frame_height,
            ..Default::default()
        });
    }
    let path = PathBuf::from(arg);
    if path.is_file() {
        DatasetSource::Image { path }
    } else {
        DatasetSource::Frames { path }
    }
}

#[derive(Args, Debug)]
pub struct CheckpointArgs {
    /// Checkpoint file [default: $SPRITEFACTOR_CACHE/checkpoint.sfck].
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

impl CheckpointArgs {
    pub fn path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| cache_dir().join(CHECKPOINT_FILE))
    }
}

/// Human-readable summary of the configuration, including the anchor grid
/// arithmetic.
pub fn describe(run: &RunConfig) -> String {
    let m = &run.model;
    let t = &run.train;
    let (gw, gh) = (2 * m.frame_width / m.k, 2 * m.frame_height / m.k);
    let dataset = match &run.dataset.source {
        Some(DatasetSource::Frames { path }) => format!("frames in {}", path.display()),
        Some(DatasetSource::Image { path }) => format!("single image {}", path.display()),
        Some(DatasetSource::Synthetic(s)) => format!("synthetic, {} frames of {}x{}", s.frames, s.width, s.height),
        None => "none".into(),
    };
    format!(
        "model: k={} m={} d={} layers={} input {}x{} background {:?}\n\
         anchor grid: cols = 2*W/k = 2*{}/{} = {gw}, rows = 2*H/k = 2*{}/{} = {gh}, {} anchors per layer\n\
         training: steps={} batch={} lr={} prior_weight={} seed={}\n\
         dataset: {dataset}",
        m.k,
        m.m,
        m.d,
        m.layers,
        m.frame_width,
        m.frame_height,
        m.background,
        m.frame_width,
        m.k,
        m.frame_height,
        m.k,
        gw * gh,
        t.steps,
        t.batch_size,
        t.learning_rate,
        t.prior_weight,
        t.seed,
    )
}

pub fn parse_ids(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().with_context(|| format!("invalid sprite id {s:?}")))
        .collect()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
