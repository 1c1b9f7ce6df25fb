use biparam_core::Error as CoreError;

/// Exit code 0: success.
pub const EXIT_OK: i32 = 0;
/// Exit code 1: an acceptance check failed.
pub const EXIT_FAILURE: i32 = 1;
/// Exit code 2: configuration or input error.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Every error reaching the top level stems from the configuration or
    /// the files it names; IO failures while writing reports are the rest.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_FAILURE,
            _ => EXIT_CONFIG,
        }
    }
}
