use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up; `axes` names the offending dimensions.
    #[error("dimension error in {op}: {axes}")]
    Dimension { op: &'static str, axes: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axes: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axes: axes.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Checkpoint(_) | Error::Tape(_) => 1,
            Error::Data(_) | Error::Spec(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
