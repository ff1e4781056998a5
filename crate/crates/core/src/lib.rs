//! Training, tuning, and evaluation of blind-image contrastive ranking
//! confidence probes over cached hidden states.

pub mod ablation;
pub mod cli;
pub mod error;
pub mod feature_store;
pub mod hpo;
pub mod metrics;
pub mod probe;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
