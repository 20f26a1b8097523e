use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("invalid configuration `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("idx: {0}")]
    Idx(#[from] IdxError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv {path}: row {row}, column `{column}`: {msg}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: String,
        msg: String,
    },

    #[error("non-finite loss at {phase} iteration {iter}")]
    NonFinite { phase: &'static str, iter: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{msg}")]
    Oracle { msg: String },

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures specific to the IDX container format. Each corruption mode has
/// its own variant so callers can tell them apart.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("file too short for header ({len} bytes)")]
    ShortHeader { len: usize },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("unsupported element type code {0:#04x}")]
    UnsupportedType(u8),
    #[error("dimension count {found} does not match expected {expected}")]
    DimCount { found: u8, expected: u8 },
    #[error("dimension sizes {0:?} overflow the addressable payload")]
    DimOverflow(Vec<u32>),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("image and label counts differ ({images} vs {labels})")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} outside [0, {classes})")]
    LabelRange {
        label: usize,
        index: usize,
        classes: usize,
    },
}
