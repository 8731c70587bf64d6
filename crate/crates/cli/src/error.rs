use thiserror::Error;

use crate::io::LoadError;

/// Process exit status for usage errors (bad flags or flag values).
pub const EXIT_USAGE: i32 = 1;
/// Process exit status for runtime failures (IO, data, estimation).
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid value for {flag}: {reason}")]
    Usage { flag: String, reason: String },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error(transparent)]
    Estimation(gpml_core::Error),

    #[error("{0}")]
    Runtime(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn usage(flag: &str, reason: impl Into<String>) -> Self {
        Self::Usage {
            flag: flag.to_string(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage { .. } => EXIT_USAGE,
            Self::Estimation(gpml_core::Error::InvalidParameter { .. }) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

impl From<gpml_core::Error> for CliError {
    fn from(e: gpml_core::Error) -> Self {
        Self::Estimation(e)
    }
}
