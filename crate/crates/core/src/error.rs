use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("taxonomy: fine class `{0}` has no coarse parent")]
    OrphanFine(String),
    #[error("taxonomy: coarse class `{0}` has no fine children")]
    EmptyCoarse(String),
    #[error("taxonomy: duplicate name `{0}`")]
    DuplicateName(String),
    #[error("taxonomy: entry under `{0}` nests deeper than two levels")]
    TooDeep(String),
    #[error("taxonomy: {0}")]
    EmptyTaxonomy(&'static str),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bag file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },
    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },
    #[error("invalid bag: {0}")]
    InvalidBag(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("non-finite loss on slide `{0}`")]
    NonFiniteLoss(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
