use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input tensor had the wrong extent along a named axis.
    #[error("{op}: shape mismatch on axis `{axis}` (expected {expected}, got {actual})")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: rank mismatch (expected {expected}, got {actual})")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("batch norm running statistics are not initialized")]
    UninitializedStats,

    #[error("frame mask selects no frames")]
    EmptyMask,

    #[error("gradient tape was already replayed; call reset() before recording again")]
    TapeConsumed,

    #[error("need at least one bonafide and one spoof record")]
    SingleClass,

    #[error("degenerate t-DCF cost: {0}")]
    DegenerateCost(String),

    #[error("{path}: bad magic (expected {expected:?}, found {found:?})")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u16,
        supported: u16,
    },

    #[error("{path}: truncated ({context})")]
    Truncated { path: PathBuf, context: String },

    #[error("{path}: {extra} unexpected trailing bytes")]
    TrailingData { path: PathBuf, extra: usize },

    #[error("{path}: non-finite value at element {index}")]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            axis,
            expected,
            actual,
        }
    }
}
