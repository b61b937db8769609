use std::io;
use std::path::{Path, PathBuf};

use logsentinel_core as core_;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the command line, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: line {line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] core_::Error),
    #[error("stage {stage} failed (artifact {artifact}): {source}")]
    Stage {
        stage: &'static str,
        artifact: PathBuf,
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Core(e) => match e {
                core_::Error::NonFinite(_) | core_::Error::NonFiniteLoss { .. } => 4,
                core_::Error::InvalidConfig(_) => 2,
                _ => 3,
            },
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 3,
        }
    }
}

/// A parse failure inside one text format, before a path is attached.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct FormatError {
    pub line: usize,
    pub msg: String,
}

impl FormatError {
    pub fn new(line: usize, msg: impl Into<String>) -> Self {
        FormatError {
            line,
            msg: msg.into(),
        }
    }

    pub fn at(self, path: &Path) -> Error {
        Error::Format {
            path: path.to_path_buf(),
            line: self.line,
            msg: self.msg,
        }
    }
}
