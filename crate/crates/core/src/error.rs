use thiserror::Error;

/// Errors raised by the numerical kernels and physics evaluators.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular point: {0}")]
    Singular(String),

    #[error("{what} did not converge: estimate {estimate:e}, error {error:e}")]
    NoConvergence {
        what: String,
        estimate: f64,
        error: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
