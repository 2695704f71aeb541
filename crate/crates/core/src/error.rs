//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/sequence dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid configuration (model, schedule, dataset spec, run config).
    #[error("configuration error: {0}")]
    Config(String),
    /// Corpus or vocabulary violates its contract.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or an invalid probability distribution.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A posterior row collapsed to all-zero mass after clamping.
    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),
    /// Training cannot continue (NaN loss/gradient).
    #[error("training aborted: {0}")]
    Training(String),
    /// A brute-force oracle was asked for an instance too large to enumerate.
    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
