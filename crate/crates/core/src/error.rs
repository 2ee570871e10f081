use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"CVLM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated store: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: u64, needed: u64, len: u64 },
    #[error("record count mismatch: header says {header}, body holds {actual}")]
    RecordCountMismatch { header: u64, actual: u64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(u64),
    #[error("unknown sample id {0}")]
    UnknownId(u64),
    #[error("invalid label byte {0}")]
    InvalidLabel(i8),
    #[error("class {0} absent")]
    MissingClass(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate vector: norm {0:e} below 1e-12")]
    ZeroNorm(f64),
    #[error("sample {id}: embedding norm deviates from 1 by {deviation:e}")]
    NotUnitNorm { id: u64, deviation: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient samples: {0}")]
    Insufficient(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
