//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpeError {
    /// Invalid configuration: dimension mismatches, unknown estimator keys,
    /// out-of-range parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A structural invariant of a domain type does not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// The behavior policy assigns probability zero to an action that was
    /// actually logged, so importance ratios are undefined.
    #[error(
        "absolute continuity violated at step {t}: behavior probability is zero \
         for action {action} at observation {obs}"
    )]
    AbsoluteContinuity { t: usize, obs: usize, action: usize },

    /// A numerical solver failed to converge or produced non-finite values.
    #[error("solver error: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for OpeError {
    fn from(e: serde_json::Error) -> Self {
        OpeError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, OpeError>;
