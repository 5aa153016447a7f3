//! Self-supervised denoising of dynamic image sequences.
//!
//! A target frame and a handful of neighbouring frames are denoised by a
//! per-sequence trained pipeline: a blind-spot single-frame denoiser, a
//! registration network that aligns the denoised neighbours to the target,
//! and a blind-spot multi-frame denoiser that fuses everything into the
//! final estimate. Simulation, phantom, metric and I/O tooling live next to
//! the pipeline.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod noise;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

/// Single-channel image, row-major `(height, width)`.
pub type Image = ndarray::Array2<f32>;
