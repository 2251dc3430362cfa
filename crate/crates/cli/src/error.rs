use sae_core::error::SaeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    NonConvergence(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Model(#[from] SaeError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Unsupported(_) => 4,
            CliError::Model(e) => match e {
                SaeError::InvalidDataset(_) | SaeError::Domain(_) | SaeError::MomentDoesNotExist { .. } => 2,
                SaeError::NoConvergence { .. } | SaeError::UnconvergedFit => 3,
                SaeError::Unsupported(_) => 4,
                _ => 1,
            },
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
