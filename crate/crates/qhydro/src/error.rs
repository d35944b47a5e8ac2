use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum QhError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("density is zero or negative: {0}")]
    BadDensity(String),

    #[error("deterministic limit: {0}")]
    DeterministicLimit(String),

    #[error("non-integrable singularity: {0}")]
    NonIntegrable(String),

    #[error("drift-free region: kernel invalid")]
    DriftFree,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, QhError>;
