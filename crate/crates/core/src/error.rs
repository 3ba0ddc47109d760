use thiserror::Error;

/// Errors raised by the transport toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// An integrator produced a non-finite quantity.
    #[error("numerical failure at t = {t}: {message}")]
    NumericalFailure { t: f64, message: String },

    /// A simulated state exceeded the divergence threshold.
    #[error("simulation diverged at step {step} (path {path}, value {value})")]
    Diverged { step: usize, path: usize, value: f64 },

    /// Training produced a non-finite loss.
    #[error("loss diverged at SGD step {step}")]
    LossDiverged { step: usize },

    /// A backward pass was requested against a forward cache that no longer
    /// matches the parameters or the batch.
    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
