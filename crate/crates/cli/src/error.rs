use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] qann_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("cannot read {}: {source}", path.display())]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid config {}: {message}", path.display())]
    ConfigFile { path: PathBuf, message: String },

    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 2 for configuration and data problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_user_error() => 2,
            CliError::Core(_) | CliError::Output { .. } => 1,
            CliError::Usage(_) | CliError::Input { .. } | CliError::ConfigFile { .. } => 2,
        }
    }
}

pub fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_output(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

/// Missing input files are the caller's mistake, not a runtime failure.
pub fn input_context(path: &Path) -> impl FnOnce(qann_core::Error) -> CliError + '_ {
    move |e| match e {
        qann_core::Error::Io(source) => CliError::Input {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Core(other),
    }
}
