//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, numerics and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix dimensions do not line up with what the operation expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    /// A scalar parameter is outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Sample degenerate for the requested statistic (e.g. zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative scheme failed to converge within its budget.
    #[error("no convergence: {0}")]
    NonConvergence(String),

    /// Malformed input data (CSV cells, manifest fields, missing entries).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub(crate) fn not_spd(msg: impl Into<String>) -> Self {
        Error::NotSpd(msg.into())
    }
}
