//! Error type shared across the library.
//!
//! Variants map onto the process exit codes used by the CLI: configuration
//! and contract problems, numeric aborts, and data-format problems are kept
//! distinct so callers can translate them without string matching.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GvqError {
    /// Incompatible tensor shapes, naming both offenders.
    #[error("dimension mismatch: {left} vs {right} in {op}")]
    Dim {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A parameter outside its documented domain (temperature, quantiles, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An input outside a function's numeric domain (e.g. log of a non-positive).
    #[error("domain error: {0}")]
    Domain(String),

    /// A violated API contract (empty codebook, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data, with the offending line when known.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Training produced a non-finite loss; carries the last finite record.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GvqError>;

impl GvqError {
    /// Shorthand for a dimension error from two (rows, cols) shapes.
    pub fn dim(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Self {
        GvqError::Dim {
            op,
            left: format!("{}x{}", a.0, a.1),
            right: format!("{}x{}", b.0, b.1),
        }
    }
}
