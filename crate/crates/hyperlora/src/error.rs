use std::io;
use std::path::{Path, PathBuf};

use hyperlora_core::Error as CoreError;

/// Failure of a file format reader.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: &'static [u8] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("dimensions {0:?} overflow the addressable size")]
    DimOverflow(Vec<u64>),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// Error of a CLI command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, e: io::Error) -> Self {
        AppError::Data(format!("{}: {e}", path.display()))
    }

    pub fn format(path: &Path, e: FormatError) -> Self {
        AppError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_) => AppError::Numeric(e.to_string()),
            CoreError::Config(_) => AppError::Usage(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

pub(crate) fn read(path: &Path) -> AppResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> AppResult<()> {
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> AppResult<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| AppError::io(path, e))?;
    Ok(path.to_path_buf())
}
