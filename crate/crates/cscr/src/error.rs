use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Data { path: PathBuf, source: cscr_core::Error },
    #[error(transparent)]
    Core(#[from] cscr_core::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl std::fmt::Display) -> Self {
        CliError::Parse { path: path.into(), line, message: message.to_string() }
    }

    pub fn data(path: impl Into<PathBuf>, source: cscr_core::Error) -> Self {
        CliError::Data { path: path.into(), source }
    }

    /// 2 for usage mistakes, 1 for everything the data or filesystem caused.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
