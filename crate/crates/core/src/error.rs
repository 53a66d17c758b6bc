use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("row {row} is not unit length (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("mean over an empty subset")]
    EmptySubset,

    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("inconsistent ensemble: {0}")]
    InconsistentEnsemble(String),

    #[error("tracklet table does not partition the gallery: {0}")]
    InvalidPartition(String),

    #[error("gallery of {n} rows is too small for k = {k} (need at least k + 1)")]
    GalleryTooSmall { k: usize, n: usize },

    #[error("query has no relevant gallery item")]
    NoRelevant,

    #[error("evaluation over an empty query set")]
    EmptyEval,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("invalid stage order: {0}")]
    StageOrder(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
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

    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
