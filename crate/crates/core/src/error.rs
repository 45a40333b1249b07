use std::path::PathBuf;

use gated_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{path}: not a supported raster format")]
    UnsupportedFormat { path: PathBuf },
    #[error("{path}: expected 3 colour channels, found {channels}")]
    GrayscaleInput { path: PathBuf, channels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("disk full while writing {path}")]
    DiskFull { path: PathBuf },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("pairing: {0}")]
    Pairing(String),
    #[error("missing reference: {0}")]
    MissingReference(String),
    #[error("scorer `{name}` failed: {msg}")]
    ScorerFailure { name: String, msg: String },
    #[error("non-finite loss at step {step} (batch {batch_ids:?})")]
    NanLoss { step: u64, batch_ids: Vec<String> },
    #[error("checkpoint checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint does not match the architecture: {}", .0.join("; "))]
    ArchitectureMismatch(Vec<String>),
    #[error("config `{key}`: {msg}")]
    Config { key: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::StorageFull {
            Error::DiskFull { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status for this error: 2 for usage, configuration and
    /// dataset problems, 3 for numeric and shape failures, 4 for I/O and
    /// file-format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Layout(_) | Error::Pairing(_) | Error::MissingReference(_) => 2,
            Error::NanLoss { .. } | Error::Shape(_) | Error::Tensor(_) => 3,
            Error::Decode { .. }
            | Error::UnsupportedFormat { .. }
            | Error::GrayscaleInput { .. }
            | Error::Io { .. }
            | Error::DiskFull { .. }
            | Error::ScorerFailure { .. }
            | Error::ChecksumMismatch(_)
            | Error::VersionMismatch { .. }
            | Error::ArchitectureMismatch(_) => 4,
        }
    }
}
