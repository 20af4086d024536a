use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error in {file}: {msg}")]
    Data { file: PathBuf, msg: String },
    #[error("{file}: truncated at byte offset {offset}")]
    Truncated { file: PathBuf, offset: u64 },
    #[error("non-finite loss at step {step}, epoch {epoch}")]
    Numerical { step: usize, epoch: usize },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(file: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            file: file.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ (Error::AtStep { .. } | Error::Numerical { .. }) => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 2,
            Error::Data { .. } | Error::Truncated { .. } | Error::Io { .. } => 3,
            Error::Numerical { .. } => 4,
            Error::AtStep { .. } => unreachable!(),
        }
    }
}
