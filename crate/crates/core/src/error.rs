use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("no image files found in {0}")]
    EmptyDirectory(PathBuf),

    #[error("{file}: expected {expected_w}x{expected_h} frame, found {found_w}x{found_h}")]
    MixedDimensions { file: PathBuf, expected_w: u32, expected_h: u32, found_w: u32, found_h: u32 },

    #[error("training diverged at step {step}: non-finite {term}")]
    Diverged { step: u64, term: String },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("unknown sprite id {id} (dictionary has {count} sprites)")]
    UnknownSprite { id: usize, count: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
