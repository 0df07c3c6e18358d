use std::path::PathBuf;

use thiserror::Error;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitCode(pub i32);

impl ExitCode {
    pub const OK: ExitCode = ExitCode(0);
    pub const INTERNAL: ExitCode = ExitCode(1);
    pub const USAGE: ExitCode = ExitCode(2);
    pub const DATA: ExitCode = ExitCode(3);
    pub const CHECKPOINT: ExitCode = ExitCode(4);
    pub const NUMERIC: ExitCode = ExitCode(5);
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] opsc_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {reason}")]
    BadInput { path: PathBuf, reason: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        use opsc_core::Error as E;
        match self {
            CliError::Usage(_) => ExitCode::USAGE,
            CliError::Io { .. } | CliError::Csv { .. } | CliError::BadInput { .. } => ExitCode::DATA,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::Config(_) => ExitCode::USAGE,
                E::MalformedBytecode { .. }
                | E::MalformedRecord { .. }
                | E::InvalidData(_)
                | E::Shape { .. }
                | E::Io { .. }
                | E::Json(_) => ExitCode::DATA,
                E::Checkpoint(_) | E::VocabMismatch { .. } => ExitCode::CHECKPOINT,
                E::NonFinite(_) => ExitCode::NUMERIC,
                E::TapeConsumed => ExitCode::INTERNAL,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
