use std::path::PathBuf;

use thiserror::Error;

use crate::data_io::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("all {trials} trials failed; last error: {last}")]
    AllTrialsFailed { trials: usize, last: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

/// Failures decoding a VISF container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"VISF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported VISF version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("tensor has no elements")]
    Empty,
    #[error("dimension product overflows")]
    Overflow,
}
