//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("step plan: {0}")]
    Plan(String),
    #[error("ESO violated at probe {probe}: lhs {lhs:.6e} > rhs {rhs:.6e} (ratio {ratio:.6})")]
    EsoViolation {
        probe: usize,
        lhs: f64,
        rhs: f64,
        ratio: f64,
    },
    #[error("divergence at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },
    #[error("saddle reference: {0}")]
    Reference(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
