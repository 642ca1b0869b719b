use std::path::PathBuf;

use securelink_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const REJECT: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const CONVERGENCE: u8 = 4;
    pub const MISSING_PREREQUISITE: u8 = 5;
    pub const UNKNOWN_ID: u8 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                CoreError::Config(_) => exit::USAGE,
                CoreError::Convergence { .. } => exit::CONVERGENCE,
                CoreError::UnknownId(_) => exit::UNKNOWN_ID,
                _ => exit::DATA,
            },
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Format { .. } => exit::DATA,
            CliError::MissingPrerequisite(_) => exit::MISSING_PREREQUISITE,
            CliError::Usage(_) => exit::USAGE,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_contract() {
        assert_eq!(CliError::from(CoreError::Data("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::Config("x".into())).exit_code(), 2);
        assert_eq!(
            CliError::from(CoreError::Convergence {
                iterations: 1,
                violation: 1.0
            })
            .exit_code(),
            4
        );
        assert_eq!(CliError::from(CoreError::UnknownId("x".into())).exit_code(), 6);
        assert_eq!(CliError::MissingPrerequisite("x".into()).exit_code(), 5);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
    }
}
