//! Ensemble digital-twin toolkit for reactor loss-of-flow transients.
//!
//! The crate is organized as a pipeline:
//!
//! * [`plant`] simulates a lumped-parameter primary loop driven by a pump
//!   coast-down, producing episodes of 15 sensor channels plus a hidden
//!   fuel-centerline temperature series.
//! * [`dataset`] samples episode collections (training, interpolation and
//!   extrapolation splits), selects input features by Pearson correlation,
//!   and partitions the training space into pump-degradation regimes.
//! * [`fnn`] trains small feed-forward networks (one digital twin per
//!   regime and seed) with k-fold epoch selection and L2 regularization,
//!   and persists them as a model library.
//! * [`pva`] scores every twin online against measured surrogate channels
//!   with a PID-style tracking error and blends the twin predictions into
//!   a single estimate by probabilistic voting.
//! * [`harness`] drives end-to-end experiments (coverage comparisons,
//!   per-twin breakdowns, context-switch runs) and writes reports.

pub mod config;
pub mod dataset;
pub mod fnn;
pub mod harness;
pub mod plant;
pub mod pva;
pub mod seed;

use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("flow reached zero at step {step}: scenario is outside the model's validity range")]
    ZeroFlow { step: usize },

    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(String),

    #[error("channel not found: {0}")]
    MissingChannel(String),

    #[error("feature selection produced an empty feature list")]
    EmptyFeatureSet,

    #[error("regime subset for range [{low}, {high}] contains no episodes")]
    EmptyRegime { low: f64, high: f64 },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    TrainDiverged { epoch: usize },

    #[error("sample {index} rejected by the simulator: {source}")]
    SampleRejected {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("case {case_id}: {source}")]
    CaseFailed {
        case_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("model library at {0} is empty")]
    EmptyLibrary(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
