use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid system parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("trajectory is not stationary: |x| = {value:e} at step {step}")]
    NotStationary { step: usize, value: f64 },

    #[error("need covariances up to lag {needed}, have {available}")]
    InsufficientLags { needed: usize, available: usize },

    #[error("moment system is numerically singular (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("no block-Toeplitz matrix up to k = {k_max} is numerically full rank")]
    NoFullRank { k_max: usize },

    #[error("solver did not converge after {iterations} iterations (objective {objective:e})")]
    NotConverged { iterations: usize, objective: f64 },

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
