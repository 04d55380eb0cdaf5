use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RelicError>;

#[derive(Debug, Error)]
pub enum RelicError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unknown entity id `{0}`")]
    UnknownEntity(String),

    #[error("duplicate entity id `{0}`")]
    DuplicateId(String),

    #[error("ids missing from table: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFinite(String),

    #[error("index is stale: built at generation {built}, table now at {current}")]
    StaleIndex { built: u64, current: u64 },

    #[error("context of length {len} exceeds encoder max_len {max_len}")]
    ContextTooLong { len: usize, max_len: usize },

    #[error("rejected mention: {0}")]
    BadMention(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl RelicError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        RelicError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RelicError::Io {
            path: path.into(),
            source,
        }
    }
}
