//! Error type shared by every module of the laboratory.

use thiserror::Error;

/// Errors surfaced by grid operations, solvers, and recovery pipelines.
#[derive(Debug, Error)]
pub enum BiharmError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("operation requires a periodic grid")]
    NotPeriodic,

    #[error("singular symbol: multiplier undefined at a discrete frequency ({0})")]
    SingularSymbol(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular operator: {0}")]
    SingularOperator(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, BiharmError>;
