//! Multi-source semi-supervised volumetric segmentation.
//!
//! Three students train on the main (labeled), mixed (unlabeled, close to the
//! main source) and other (unlabeled, remaining) subsets; the mixed and other
//! students are each paired with a teacher that tracks them by exponential
//! moving average. Teacher predictions supervise their students through a
//! confidence-gated, confidence-weighted cross-entropy computed over cubic
//! regions of the volume.
//!
//! Everything runs on a synthetic multi-source phantom dataset so the whole
//! pipeline is reproducible on a laptop.

pub mod analysis;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod partition;
pub mod rng;
pub mod svg;
pub mod swc;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
