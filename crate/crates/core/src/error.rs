use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the backend toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed archive header: {0}")]
    MalformedHeader(String),

    #[error("record {record} ({id}): expected {expected} values, found {found}")]
    DimensionMismatch {
        record: usize,
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("record {record}: duplicate segment id {id}")]
    DuplicateSegment { record: usize, id: String },

    #[error("record {record} ({id}): non-finite value at position {position}")]
    NonFinite {
        record: usize,
        id: String,
        position: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown segment id {id}")]
    UnknownId { line: usize, id: String },

    #[error("line {line}: unparseable label {token:?}")]
    BadLabel { line: usize, token: String },

    #[error("model format error: {0}")]
    Format(String),

    #[error("model version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("zero or non-finite vector cannot be length-normalized")]
    ZeroVector,

    #[error("numerically singular matrix: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("score set needs at least one target and one nontarget")]
    MissingClass,

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("non-finite gradient in block {0}")]
    NonFiniteGradient(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("training diverged: loss {loss} exceeds 10x initial {initial}")]
    Diverged { loss: f64, initial: f64 },

    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
