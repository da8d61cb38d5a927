use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An index (token id, target class, sequence index) is out of range.
    #[error("index error: {0}")]
    Index(String),
    /// A sequence exceeds the model's maximum length.
    #[error("length error: sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    /// A documented precondition does not hold.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A NaN or infinity appeared in tensor data.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// A pruning plan does not fit the model it is applied to.
    #[error("plan error: {0}")]
    Plan(String),
    /// A file could not be parsed or failed an integrity check.
    #[error("format error: {0}")]
    Format(String),
    /// A checkpoint file was rejected while loading.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor directory does not match the model: {0}")]
    ShapeMismatch(String),
}

impl Error {
    /// True for errors that originate from the filesystem or from malformed files.
    pub fn is_io_or_format(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_) | Error::Checkpoint(_))
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn dim(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
