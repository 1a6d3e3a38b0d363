//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value or combination is not usable. The message
    /// starts with the offending field path where one exists.
    #[error("config error: {0}")]
    Config(String),

    /// Snapshot cannot be used in this context (architecture or hash mismatch).
    #[error("incompatible snapshot: {0}")]
    IncompatibleSnapshot(String),

    /// A line of an input file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Well-formed data that violates a datatype invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation that requires data was given none.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
