//! Learned perceptual audio quality metric.
//!
//! Builds codec-degraded corpora with surrogate quality labels, fine-tunes an
//! embedding encoder under a rank-contrastive loss, scores test signals by
//! embedding distance to a reference and correlates the scores with
//! listening-test results.

pub mod audio;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod optim;
pub mod provenance;
pub mod error;
pub mod evalreport;
pub mod rnc;
pub mod rng;
pub mod scorer;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, Result};
