//! Model, training and dataset configuration.
//!
//! All three sections can live in one TOML or JSON file (`[model]`,
//! `[train]`, `[dataset]`); every field has a default so a file only needs
//! to mention what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLayout;
use crate::dataset::SyntheticConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// One fixed colour estimated from the data.
    Solid,
    /// A learned texture larger than the frame, cropped per frame.
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sprite side length in pixels; a power of two.
    pub k: usize,
    /// Dictionary size.
    pub m: usize,
    /// Latent width.
    pub d: usize,
    /// Number of sprite layers.
    pub layers: usize,
    /// Input frame size the model is built for.
    pub frame_width: usize,
    pub frame_height: usize,
    pub groups: usize,
    pub leaky_slope: f64,
    /// Channels of the first downsampling block; doubles per block.
    pub base_width: usize,
    pub width_cap: usize,
    pub background: BackgroundMode,
    /// Texture size; defaults to `2 * frame_width x frame_height`.
    pub texture_width: Option<usize>,
    pub texture_height: Option<usize>,
    /// Spacing of candidate texture crop positions.
    pub texture_stride: usize,
    /// Keep soft selections when reconstructing (natural images and video).
    pub soft_test: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 32,
            m: 50,
            d: 128,
            layers: 2,
            frame_width: 128,
            frame_height: 128,
            groups: 8,
            leaky_slope: 0.2,
            base_width: 64,
            width_cap: 256,
            background: BackgroundMode::Solid,
            texture_width: None,
            texture_height: None,
            texture_stride: 4,
            soft_test: false,
        }
    }
}

impl ModelConfig {
    pub fn anchor_layout(&self) -> Result<AnchorLayout> {
        AnchorLayout::new(self.k, self.frame_width, self.frame_height)
    }

    pub fn texture_size(&self) -> (usize, usize) {
        (self.texture_width.unwrap_or(2 * self.frame_width), self.texture_height.unwrap_or(self.frame_height))
    }

    /// Downsampling blocks in the encoder trunk: `log2(k) - 1`.
    pub fn trunk_blocks(&self) -> usize {
        self.k.trailing_zeros() as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        self.anchor_layout()?;
        let positive = [("m", self.m), ("d", self.d), ("layers", self.layers), ("groups", self.groups)];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d.is_multiple_of(self.groups) {
            return Err(Error::config("d", format!("{} is not divisible by groups = {}", self.d, self.groups)));
        }
        if self.base_width == 0
            || !self.base_width.is_multiple_of(self.groups)
            || !self.width_cap.is_multiple_of(self.groups)
        {
            return Err(Error::config(
                "base_width",
                format!("channel widths must be positive multiples of groups = {}", self.groups),
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", "must lie in [0, 1)"));
        }
        if self.background == BackgroundMode::Texture {
            let (tw, th) = self.texture_size();
            if tw < self.frame_width || th < self.frame_height {
                return Err(Error::config(
                    "texture_width",
                    format!("texture {tw}x{th} is smaller than the {}x{} frame", self.frame_width, self.frame_height),
                ));
            }
            if self.texture_stride == 0 {
                return Err(Error::config("texture_stride", "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub background_learning_rate: f64,
    /// Weight of the beta priors relative to the reconstruction error.
    pub prior_weight: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            background_learning_rate: 1e-3,
            prior_weight: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 10_000,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (field, v) in
            [("learning_rate", self.learning_rate), ("background_learning_rate", self.background_learning_rate)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be a positive number"));
            }
        }
        if !(self.prior_weight.is_finite() && self.prior_weight >= 0.0) {
            return Err(Error::config("prior_weight", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "Adam betas must lie in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory of equally sized PNG frames, sorted by file name.
    Frames { path: PathBuf },
    /// One large image; training samples random crops of it.
    Image { path: PathBuf },
    /// Floating-sprites scenes generated from the run seed.
    Synthetic(SyntheticConfig),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Option<DatasetSource>,
    /// Random crop size `[width, height]` drawn from each frame per step.
    pub crop: Option<[usize; 2]>,
}

/// Everything a training run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some([cw, ch]) = self.dataset.crop {
            if (cw, ch) != (self.model.frame_width, self.model.frame_height) {
                return Err(Error::config(
                    "dataset.crop",
                    format!(
                        "crop {cw}x{ch} must equal the model frame size {}x{}",
                        self.model.frame_width, self.model.frame_height
                    ),
                ));
            }
        }
        if let Some(DatasetSource::Synthetic(cfg)) = &self.dataset.source {
            cfg.validate()?;
        }
        Ok(())
    }
}
