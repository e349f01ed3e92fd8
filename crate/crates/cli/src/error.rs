use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] moga_core::Error),

    #[error("verification failed: {0} check(s) did not pass")]
    VerifyFailed(usize),
}

impl CliError {
    /// 0 success, 1 verification failure, 2 usage/config, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Parse { .. } | CliError::Config { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core(moga_core::Error::Numeric(_) | moga_core::Error::Diverged { .. }) => 4,
            CliError::Core(_) => 2,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
