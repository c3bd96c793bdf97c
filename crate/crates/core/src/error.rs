use thiserror::Error;

/// Errors produced by the estimators and their supporting routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A Cholesky pivot was non-positive (or non-finite).
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Backtracking shrank the step below the configured floor without
    /// finding an acceptable iterate.
    #[error("line search step {step:e} fell below the minimum step {min_step:e}")]
    StepUnderflow { step: f64, min_step: f64 },

    /// A gradient or objective value became NaN/Inf. Usually a sign of badly
    /// scaled data.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("synthetic design is infeasible: {0}")]
    Infeasible(String),

    #[error("no positive definite draw after {attempts} attempts")]
    RetryExhausted { attempts: usize },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed input: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
