//! Moving-one-Sample-out (MoSo) data pruning at desk scale.
//!
//! A surrogate classifier is trained with plain mini-batch SGD while its
//! parameters are checkpointed. Every training sample is then scored by how
//! well its gradient agrees with the mean gradient of the remaining samples
//! across the checkpoints, and the lowest-scored fraction is pruned. An exact
//! leave-one-out retraining oracle, difficulty-based baselines and coreset
//! evaluation tools are provided for validation.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod scores;
pub mod scoring;
pub mod seed;
mod textio;
pub mod trainer;

pub use error::{Error, Result};
