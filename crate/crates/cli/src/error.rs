use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] denoise_tts::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use denoise_tts::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(
                E::Data(_) | E::Alignment(_) | E::InvalidInput(_) | E::Checkpoint(_) | E::Io { .. } | E::Wav { .. } | E::Json(_),
            ) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
