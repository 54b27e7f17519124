use thiserror::Error;

/// Errors raised by the collapse lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("degenerate regime: {0}")]
    Degenerate(String),

    /// Non-global critical point with `d <= K`: the null-space construction of a
    /// negative-curvature direction is unavailable.
    #[error("strict saddle cannot be verified: {0}")]
    SaddleUnverifiable(String),

    #[error("run diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        last_good: Vec<f64>,
    },

    #[error("backbone training diverged at epoch {epoch}: {reason}")]
    BackboneDiverged {
        epoch: usize,
        reason: String,
        /// Records collected before the failure.
        trace: Vec<crate::backbone::EpochRecord>,
    },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
