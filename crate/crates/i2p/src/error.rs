use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] i2p_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("config: {0}")]
    Config(String),
}

pub type RunResult<T> = Result<T, RunError>;

impl RunError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 for configuration or input problems, 3 for a
    /// numeric abort, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Core(i2p_core::Error::Numeric(_)) => 3,
            RunError::Core(_) | RunError::Parse(_) | RunError::Config(_) => 2,
            RunError::Io { .. } => 1,
        }
    }
}
