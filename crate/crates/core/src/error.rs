use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("header length {declared} exceeds available {available} bytes")]
    HeaderLength { declared: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),
    #[error("size mismatch for {name:?}: dtype and shape need {expected} bytes, offsets give {actual}")]
    SizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("missing shard {0}")]
    MissingShard(PathBuf),
    #[error("tensor {name:?} appears in both {first} and {second}")]
    TensorInTwoShards {
        name: String,
        first: String,
        second: String,
    },
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("empty checkpoint at {0}")]
    EmptyCheckpoint(PathBuf),
    #[error("tensor {0:?} not found")]
    TensorNotFound(String),
    #[error("byte range of {name:?} runs past the end of its shard")]
    OutOfBounds { name: String },
    #[error("write error: {0}")]
    Write(String),
    #[error("buffer length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid naming scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
    #[error("models are incompatible:\n{0}")]
    Incompatible(String),
    #[error("input checkpoint changed since planning: {0}")]
    HashMismatch(String),
    #[error("dtype mismatch for {name:?}: {detail}")]
    DtypeMismatch { name: String, detail: String },
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("invalid fixture spec: {0}")]
    InvalidFixture(String),
    #[error("invalid histogram spec: {0}")]
    InvalidHistogram(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors that reflect invalid or incompatible inputs rather than
    /// operational failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Context { source, .. } => source.is_validation(),
            Error::Incompatible(_)
            | Error::InvalidConfig(_)
            | Error::InvalidRecipe(_)
            | Error::InvalidScheme(_)
            | Error::InvalidFixture(_)
            | Error::InvalidHistogram(_)
            | Error::HashMismatch(_)
            | Error::DtypeMismatch { .. } => true,
            _ => false,
        }
    }
}
