use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are kept fine-grained so callers (and
/// tests) can distinguish failure causes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid batch size {size} for dataset of {available} samples")]
    InvalidBatchSize { size: usize, available: usize },

    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("sample size {requested} exceeds population of {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated, need {needed} bytes but file has {actual}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        actual: usize,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("non-finite gradient at round {round}, client {client}")]
    NonFiniteClientGradient { round: usize, client: usize },

    #[error("non-finite gradient at round {round} during server training")]
    NonFiniteServerGradient { round: usize },

    #[error("non-finite model entries: {0}")]
    NonFiniteModel(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("update from client {client} is missing its anchor gradient")]
    MissingAnchor { client: usize },

    #[error("no updates to aggregate")]
    NoUpdates,

    #[error("cannot sample {requested} clients from {available}")]
    TooManyClients { requested: usize, available: usize },

    #[error("invalid bound inputs: {0}")]
    InvalidBoundInputs(String),

    #[error("config: unknown key `{0}`")]
    UnknownKey(String),

    #[error("config: missing required key `{0}`")]
    MissingKey(String),

    #[error("config: invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },

    #[error("mismatched targets across traces: {0}")]
    MismatchedTargets(String),

    #[error("malformed trace file {path}: {reason}")]
    MalformedTrace { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn invalid_value(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
