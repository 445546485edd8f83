use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid symbol {symbol:?} at position {position}")]
    InvalidSymbol { position: usize, symbol: char },

    #[error("super k-mer of {len} symbols exceeds the 65535-symbol record limit")]
    OversizeRecord { len: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("I/O error on {path}: {source}")]
    IoAt { path: PathBuf, source: io::Error },

    #[error("disk full while writing {path}")]
    DiskFull { path: PathBuf },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: missing {which} marker")]
    BadMarker { path: PathBuf, which: &'static str },

    #[error("{path}: header position {position} points outside the file")]
    BadHeaderPosition { path: PathBuf, position: u32 },

    #[error("{path}: truncated (expected {expected} bytes, found {actual})")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: invalid header: {reason}")]
    InvalidHeader { path: PathBuf, reason: String },

    #[error("operation requires a database opened for {expected}")]
    WrongMode { expected: &'static str },

    #[error("k-mer has length {actual}, database holds {expected}-mers")]
    WrongLength { expected: usize, actual: usize },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bin {bin} needs {required} bytes but only {granted} bytes may be granted")]
    OversizedBin { bin: u32, required: u64, granted: u64 },
}

const ENOSPC: i32 = 28;

impl Error {
    /// Attach a path to an I/O error, promoting "no space left" to [`Error::DiskFull`].
    pub fn io_at(path: &Path, source: io::Error) -> Self {
        if source.raw_os_error() == Some(ENOSPC) || source.kind() == io::ErrorKind::StorageFull {
            Error::DiskFull {
                path: path.to_path_buf(),
            }
        } else {
            Error::IoAt {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::IoAt { .. } | Error::DiskFull { .. } | Error::Format { .. }
        )
    }
}
