//! Audio-visual generalized zero-shot learning toolkit.
//!
//! The crate covers the full desk-scale workflow: synthesizing controllable
//! audio-visual benchmarks, training a conditional WGAN-GP feature generator,
//! training out-of-distribution detectors that route test samples between a
//! seen-class classifier and an unseen-class embedding model, and scoring the
//! composite system with generalized zero-shot metrics.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`data`]: feature spaces, class tables, splits, synthetic benchmark
//!   generation, and the on-disk dataset format.
//! * [`nn`]: a small reverse-mode autodiff engine over dense f64 matrices,
//!   multilayer perceptrons, and Adam. Everything downstream trains on it.
//! * [`generator`]: conditional WGAN-GP that synthesizes class-conditional
//!   fused features from text embeddings.
//! * [`ood`]: binary and entropy-based seen/unseen detectors plus threshold
//!   selection and ROC analysis hooks.
//! * [`seen`]: softmax classifier over seen classes.
//! * [`unseen`]: cross-attention embedding model matching fused features to
//!   class text embeddings, with its ablation switches.
//! * [`pipeline`]: end-to-end training, routing, evaluation, and the ablation
//!   drivers.
//! * [`metrics`]: mean class accuracy, harmonic means, ROC/AUC utilities.
//! * [`checkpoint`]: deterministic save/load for every trained stage.

pub mod checkpoint;
pub mod data;
pub mod generator;
mod io;
pub mod metrics;
pub mod nn;
pub mod ood;
pub mod pipeline;
pub mod seen;
pub mod unseen;

pub use data::{ClassId, Dataset, DatasetConfig, Split};
pub use metrics::GzslScores;
pub use pipeline::{EvalReport, GatingMethod, PipelineConfig};

use thiserror::Error;

/// Unified error type for dataset, checkpoint, and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint does not match requested model: {0}")]
    CheckpointKind(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
