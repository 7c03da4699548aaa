//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: usage
//! problems (2), data/format problems (3) and numeric aborts (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file or archive (bad manifest, wrong byte length, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Structurally well-formed data that violates a dataset invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor dimension mismatch in a forward pass.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument to an operation (unknown class id, label outside
    /// the classifier's class set, empty batch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Value outside the mathematical domain of a loss term.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation requested in a state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration (bad field value, conflicting options).
    #[error("config error: {0}")]
    Config(String),

    /// A loss term became non-finite during training.
    #[error("numeric abort: {term} is non-finite at iteration {iteration}")]
    Numeric { term: String, iteration: u64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
