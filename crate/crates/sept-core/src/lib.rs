//! SD-map enhanced BEV scene perception, desk scale.
//!
//! This crate implements the full pipeline: scene files and ego-frame map
//! preparation, hybrid rasterized/vectorized SD-map encoding with
//! feature-level alignment, dual gated feature fusion, intersection keypoint
//! detection, a synthetic scene generator standing in for a camera stack, the
//! lane-graph evaluation metrics, and a small training harness that ties it
//! together. Everything runs on a handwritten f64 reverse-mode array engine
//! so gradients can be verified against central differences.

pub mod dgff;
pub mod geom;
pub mod gradsuite;
pub mod ikpd;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod raster;
pub mod rng;
pub mod sdmap;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vector;

pub use tensor::{DiffArray, GradRecord, Gradients, Params, TensorError};
