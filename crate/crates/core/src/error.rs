use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("size error: element count of {0:?} overflows usize")]
    Size(Vec<usize>),

    /// A non-finite value appeared where training requires finite numbers.
    #[error("divergence in {location}: non-finite value")]
    Divergence { location: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data file missing: {}", .0.display())]
    DataMissing(PathBuf),

    #[error("format error in {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error("corrupt record {record} in {}: label {label} out of range", .path.display())]
    CorruptRecord {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("unknown layer '{name}' (valid: {valid})")]
    UnknownLayer { name: String, valid: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn divergence(location: impl Into<String>) -> Self {
        Error::Divergence {
            location: location.into(),
        }
    }
}
