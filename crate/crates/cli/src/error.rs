use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mmists_core::Error),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(mmists_core::Error::InvalidConfig(_)) => "ConfigInvalid",
            CliError::Core(e) => e.kind(),
            CliError::ConfigInvalid(_) => "ConfigInvalid",
            CliError::MissingInput(_) => "MissingInput",
            CliError::CheckFailed(_) => "CheckFailed",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
