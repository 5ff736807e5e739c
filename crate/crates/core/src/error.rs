use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid representation: {0}")]
    InvalidRepr(String),

    #[error("manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("pair {pair_id}: score {score} outside [1, 4]")]
    ScoreRange { pair_id: String, score: f64 },

    #[error("duplicate pair_id {0}")]
    DuplicatePair(String),

    #[error("pair {pair_id}: missing representation file {path}")]
    MissingFile { pair_id: String, path: PathBuf },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {0} not in the class set {{1, 2, 3, 4}}")]
    LabelDomain(f64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("zero variance input")]
    ZeroVariance,

    #[error("need at least 2 systems for correlation, got {0}")]
    TooFewSystems(usize),

    #[error("empty sequence")]
    EmptySequence,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no epoch produced a usable validation metric")]
    NoSelectableEpoch,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
