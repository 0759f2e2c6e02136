//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by parsing, training, metric evaluation and reporting.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data, with the 1-based line number of the offending row.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Future data would have entered training or feature construction.
    #[error("leakage: {0}")]
    Leakage(String),

    /// A training run could not be performed (empty window, bad spec).
    #[error("training error: {0}")]
    Training(String),

    /// Not enough events to evaluate a metric or select a period.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A metric denominator is (numerically) zero.
    #[error("degenerate metric: {0}")]
    Degenerate(String),

    /// Quantile calibration could not produce ordered boundaries.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A configuration document is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value surfaced where contracts promise finite arithmetic.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
