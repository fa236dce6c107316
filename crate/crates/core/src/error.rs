//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for all toolkit operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A graph that must be acyclic contains a cycle.
    #[error("structural error: {0}")]
    Structural(String),

    /// Shapes, identifiers, or dimensions do not line up.
    #[error("schema error: {0}")]
    Schema(String),

    /// Synthetic generation produced a non-finite value.
    #[error("generation error: {0}")]
    Generation(String),

    /// An operation was called outside its contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// A matrix was too ill-conditioned to invert reliably.
    #[error("conditioning error: {0} (worst condition number {1:.3e})")]
    Conditioning(String, f64),

    /// Numerical failure during differentiation or evaluation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A model was assembled with inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite inputs fed to a forward pass.
    #[error("input error: {0}")]
    Input(String),

    /// Training diverged or produced a non-finite loss component.
    #[error("training error: {0}")]
    Training(String),

    /// Checkpoint archive failed validation.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Dataset files could not be loaded or validated.
    #[error("load error: {0}")]
    Load(String),

    /// A metric is undefined for the given inputs (e.g. constant observed series).
    #[error("undefined-metric error: {0}")]
    UndefinedMetric(String),

    /// Remote data retrieval failed after retries.
    #[error("network error: {0}")]
    Network(String),

    /// Invalid command-line or config arguments.
    #[error("argument error: {0}")]
    Argument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code contract:
    /// 0 success, 2 usage, 3 data, 4 training, 5 network.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 2,
            Error::Network(_) => 5,
            Error::Training(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
