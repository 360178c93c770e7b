use std::path::Path;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Numeric(String),

    #[error("{failures} replicate failures exceed the budget of {budget}")]
    OverBudget { failures: usize, budget: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) | CliError::OverBudget { .. } => 3,
            CliError::Io { .. } => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Malformed input data, reported against the file it came from.
    pub fn data(path: &Path, message: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{}: {message}", path.display()))
    }
}

impl From<stfuse::Error> for CliError {
    fn from(e: stfuse::Error) -> Self {
        match e {
            stfuse::Error::Config(_) | stfuse::Error::Parse(_) => CliError::Config(e.to_string()),
            stfuse::Error::Io { path, source } => CliError::Io { path, source },
            other => CliError::Numeric(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
