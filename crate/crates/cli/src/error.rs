use thiserror::Error;

/// Exit code 2 for usage and configuration problems, 1 for failures while
/// running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<wrm_core::Error> for CliError {
    fn from(e: wrm_core::Error) -> Self {
        match e {
            wrm_core::Error::InvalidConfig { message } => CliError::Usage(message),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
