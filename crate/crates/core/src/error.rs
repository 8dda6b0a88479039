use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bundle has no tokens")]
    EmptyBundle,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in `{0}`")]
    NonFiniteValue(&'static str),

    #[error("invalid original indices: {0}")]
    InvalidIndices(String),

    #[error("grid {rows}x{cols} does not cover {n} tokens")]
    GridMismatch { rows: usize, cols: usize, n: usize },

    #[error("bundle has no class token")]
    MissingCls,

    #[error("bundle has no text embedding")]
    MissingText,

    #[error("bundle has no patch grid")]
    MissingGrid,

    #[error("empty input")]
    EmptyInput,

    #[error("LOF needs more than k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("bad magic {0:?}, expected \"TKB1\"")]
    BadMagic([u8; 4]),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("ragged CSV: row {row} has {found} cells, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },

    #[error("non-numeric CSV cell {cell:?} at row {row}, column {col}")]
    NonNumericCell { row: usize, col: usize, cell: String },

    #[error("duplicate placement index {0}")]
    DuplicatePlacement(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the content of an input file or bundle
    /// rather than by the environment.
    pub fn is_input_format(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::DuplicatePlacement(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
