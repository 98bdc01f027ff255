use std::path::PathBuf;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty population: {0}")]
    EmptyPopulation(&'static str),
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("degenerate ranks")]
    DegenerateRanks,
    #[error("scale search failed: degenerate head")]
    DegenerateHead,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid model descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("head l{layer} h{head} is invalid: {violations:?}")]
    InvalidHead { layer: usize, head: usize, violations: Vec<Violation> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: content hash does not match the atlas manifest")]
    HashMismatch { path: PathBuf },
    #[error("atlas: {0}")]
    Atlas(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
