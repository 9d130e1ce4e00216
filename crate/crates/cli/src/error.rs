use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot read {}: {source}", path.display())]
    Unreadable { path: PathBuf, source: std::io::Error },

    #[error("cannot write {}: {source}", path.display())]
    Unwritable { path: PathBuf, source: sdctc::Error },

    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: sdctc::Error },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] sdctc::Error),
}

impl CliError {
    /// 0 success, 2 usage or validation, 3 data or shape mismatch, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Unreadable { .. } | CliError::Unwritable { .. } => 2,
            CliError::Input { source, .. } | CliError::Core(source) => core_code(source),
            CliError::CheckFailed(_) => 1,
        }
    }
}

fn core_code(e: &sdctc::Error) -> u8 {
    use sdctc::Error::*;
    match e {
        InvalidArgument(_) | UnsupportedVersion(_) | TooManySpeakers { .. } => 2,
        Shape(_) | Mismatch(_) | TokenOutOfRange { .. } | InvalidGrid(_) | Json(_) => 3,
        InfiniteLoss | TooLarge { .. } | SingularScatter | Io(_) => 1,
    }
}
