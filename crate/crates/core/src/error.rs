use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The quantile model is not a valid (increasing) quantile function.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A covariance matrix failed its Cholesky factorization.
    #[error("matrix is not positive definite ({context}, smallest diagonal {min_diag:e})")]
    NotPositiveDefinite { context: String, min_diag: f64 },

    /// Dataset schema or invariant violation.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The sampler hit a non-finite log posterior.
    #[error("sampler aborted at iteration {iteration}: {reason}")]
    Sampler { iteration: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
