use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte {position}")]
    InvalidUtf8 { path: PathBuf, position: usize },
    #[error("{0}")]
    Format(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown symbol id {0}")]
    UnknownSymbol(u32),
    #[error("empty pattern")]
    EmptyPattern,
    #[error("duplicate pattern {0}")]
    DuplicatePattern(String),
    #[error("index {index} out of range for size {size}")]
    OutOfRange { index: usize, size: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("corpus too small: {tokens} tokens for {batch} streams of {steps} steps")]
    CorpusTooSmall {
        tokens: usize,
        batch: usize,
        steps: usize,
    },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
