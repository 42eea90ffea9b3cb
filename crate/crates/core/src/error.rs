use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarmonError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A loss or metric produced a non-finite value. `term` names the culprit.
    #[error("numerical failure in `{term}`: {detail}")]
    Numerical { term: String, detail: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl HarmonError {
    pub fn invalid_arg(msg: impl Into<String>) -> Self {
        HarmonError::InvalidArgument(msg.into())
    }

    pub fn invalid_data(msg: impl Into<String>) -> Self {
        HarmonError::InvalidData(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        HarmonError::InvalidConfig(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarmonError::InvalidConfig(_) | HarmonError::InvalidArgument(_) => 2,
            HarmonError::InvalidData(_) | HarmonError::Serde(_) => 3,
            HarmonError::Numerical { .. } => 4,
            HarmonError::MissingArtifact(_) => 5,
            HarmonError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 5,
            HarmonError::Io(_) | HarmonError::Tensor(_) => 3,
        }
    }
}

impl From<serde_json::Error> for HarmonError {
    fn from(e: serde_json::Error) -> Self {
        HarmonError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarmonError>;
