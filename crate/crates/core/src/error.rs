use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by model construction, training and evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
}

/// Errors raised while reading or writing one of the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing or malformed header")]
    MissingHeader,
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: non-numeric field `{field}`")]
    NonNumeric { line: usize, field: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {message}")]
    InvalidRecord { line: usize, message: String },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("invalid document: {0}")]
    Document(String),
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }
}
