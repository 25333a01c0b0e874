use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or config values.
    #[error("usage: {0}")]
    Usage(String),

    /// A previous step's output is missing or another command holds the directory.
    #[error("{0}")]
    Pipeline(String),

    #[error(transparent)]
    Core(#[from] staircase::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use staircase::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(_) => 2,
            CliError::Core(E::Divergence(_) | E::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}
