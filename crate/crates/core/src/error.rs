use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("window ({x0},{y0},{w},{h}) outside {width}x{height} grid")]
    WindowOutOfBounds {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("TIFF: {0}")]
    Tiff(String),

    #[error("TIFF: unsupported compression {0}")]
    UnsupportedCompression(u16),

    #[error("TIFF: unsupported sample format (format {format}, {bits} bits)")]
    UnsupportedSampleFormat { format: u16, bits: u16 },

    #[error("TIFF: missing geotags ({0})")]
    MissingGeotags(&'static str),

    #[error("HTTP error: {0}")]
    Http(String),

    #[error("server does not support byte ranges for {0}")]
    RangeNotSupported(String),

    #[error("short read: requested {requested} bytes at offset {offset}, got {got}")]
    ShortRead { offset: u64, requested: u64, got: u64 },

    #[error("checksum mismatch for {url}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        url: String,
        expected: String,
        actual: String,
    },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("CRS mismatch: {0} vs {1}")]
    CrsMismatch(u32, u32),

    #[error("grids do not overlap")]
    EmptyOverlap,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called on a tape that was already consumed")]
    StaleTape,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { expected: u16, found: u16 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::IoPath { path, source }
}
