use thiserror::Error;

/// Errors raised by model evaluation, data handling and the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An action lies on or outside the open interval (-1, 1).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint or buffer file is truncated, corrupt or of the wrong version.
    #[error("format error: {0}")]
    Format(String),

    /// A resumed stage does not match the persisted run (missing prerequisite or config hash).
    #[error("resume mismatch: {0}")]
    Resume(String),

    #[error("environment failure: {0}")]
    Environment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Format(_) => 2,
            Error::Resume(_) => 3,
            _ => 1,
        }
    }
}
