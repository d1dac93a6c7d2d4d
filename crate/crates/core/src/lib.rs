//! Scale-frustum multi-scale segmentation for ultra-wide-area imagery.
//!
//! A projection reference point on the image plane defines a family of
//! nested observation windows (local, short-range, long-range). Each window
//! is resized to a common size, encoded, and fused into the local feature by
//! cascaded cross-attention; full images are segmented by scanning reference
//! points and summing overlapping logits.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod resample;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
