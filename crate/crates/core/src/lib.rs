//! Semi-supervised misinformation detection over dual-encoder embeddings.
//!
//! Unlabeled image/caption pairs receive pseudo-labels only when two
//! vision-language signals agree: the image-caption similarity and the
//! similarity between the caption and a captioner's description of the image.
//! Per-class thresholds for both come from the labeled data.

pub mod baselines;
pub mod cli;
pub mod consensus;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod store;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
