use thiserror::Error;

/// Errors raised by the estimation, selection, simulation and backtest code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("inner {dim}x{dim} system is singular")]
    SingularInnerSystem { dim: usize },

    #[error("symmetric eigensolver did not converge within {iterations} iterations")]
    EigenNonConvergence { iterations: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("insufficient dimensions: {0}")]
    InsufficientDimensions(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("{estimator} failed to converge after {iterations} iterations")]
    NonConvergence { estimator: String, iterations: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
