use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("buffer of length {got} does not fill shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("unknown precision tag {0}")]
    UnknownPrecision(u8),
    #[error("file holds {found} data but {expected} was requested")]
    PrecisionMismatch {
        expected: crate::Precision,
        found: crate::Precision,
    },
    #[error("query {row} has no visible key")]
    EmptyVisibleSet { row: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
