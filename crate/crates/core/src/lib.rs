//! Self-supervised sprite decomposition.
//!
//! A collection of frames is explained as a learned dictionary of RGBA
//! sprites placed on layered anchor grids and alpha-composited over a
//! background. Everything from the sprite generator to the compositor is
//! differentiable, so the dictionary, the frame encoder, the offset
//! predictor and the background are trained jointly from a reconstruction
//! loss alone.

pub mod anchors;
pub mod autograd;
pub mod checkpoint;
pub mod compositor;
pub mod config;
pub mod dataset;
pub mod decomposition;
pub mod dictionary;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod image_io;
mod linalg;
pub mod model;
pub mod nn;
pub mod params;
pub mod selection;
pub mod sprite;
pub mod tensor;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::Tensor;
