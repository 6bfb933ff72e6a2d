use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A row whose length disagrees with the declared dimensionality.
    #[error("row {row}: expected {expected} values, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid value at row {row}, column {col}: {text:?}")]
    Parse { row: usize, col: usize, text: String },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("row {row} has near-zero norm {norm:e} and cannot be normalized")]
    ZeroNorm { row: usize, norm: f64 },

    #[error("matrix is not normalized (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("index {index} out of bounds for {len} rows")]
    OutOfBounds { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("objective is undefined on the empty set")]
    EmptySubset,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("all candidates have been consumed")]
    Exhausted,

    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("invalid world spec: {0}")]
    WorldSpec(String),

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

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
