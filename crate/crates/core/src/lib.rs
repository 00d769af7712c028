//! Volumetric tumor segmentation and grading networks built on a small
//! tape-based autodiff engine.
//!
//! The pipeline runs a 3D U-Net with soft additive attention to segment the
//! tumor, masks the input volume with the predicted segmentation, and grades
//! the masked volume with a two-branch (dense + VGG-style) classifier refined
//! by spatial, channel and multi-head self-attention.

pub mod attention;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod params;
pub mod preprocess;
pub mod seed;
pub mod train;
pub mod volcore;

pub use error::{Error, FormatError, Result};
