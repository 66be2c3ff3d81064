use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the library
/// promises to report: shape mismatches, invalid construction arguments,
/// non-finite numerics, empty data sources, bad configuration, and malformed
/// files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("empty source: {0}")]
    EmptySource(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("degenerate reference returns: expert and random coincide at {0}")]
    DegenerateReference(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
