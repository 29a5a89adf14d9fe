use std::path::PathBuf;

use extravar_core::Error as CoreError;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Config = 2,
    MissingArtifact = 3,
    Runtime = 4,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{path}: line {line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::Config,
            CliError::Missing(_) => ExitCode::MissingArtifact,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ExitCode::MissingArtifact,
            CliError::Core(e) => match e {
                CoreError::InvalidConfig(_) | CoreError::EmptyBand(_) | CoreError::StepOutOfRange { .. } => {
                    ExitCode::Config
                }
                CoreError::MissingReference => ExitCode::MissingArtifact,
                _ => ExitCode::Runtime,
            },
            CliError::Format { .. } | CliError::Io { .. } => ExitCode::Runtime,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
