//! Front end for `sam-core`: config files, metrics CSV and the `sam`
//! subcommands.

pub mod commands;
pub mod config_file;
pub mod metrics;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for usage and config problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Numerical(m) => m.clone(),
            CliError::Io(e) => e.to_string(),
        }
    }
}

impl From<sam_core::Error> for CliError {
    fn from(e: sam_core::Error) -> Self {
        match e {
            sam_core::Error::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
