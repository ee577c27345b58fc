//! Library side of the `ssmkit` command-line tool.

pub mod commands;
pub mod config;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("property check failed: {0}")]
    Property(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Property(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl From<ssmkit::SsmError> for CliError {
    fn from(e: ssmkit::SsmError) -> Self {
        match e {
            ssmkit::SsmError::Divergence { step } => CliError::Divergence(format!(
                "non-finite loss or parameters at step {step}; lower the learning rate (train.adam.lr, train.adam.lr_dynamics) or enable train.adam.clip_norm"
            )),
            ssmkit::SsmError::NonFiniteGradient { segment, index } => CliError::Divergence(format!(
                "non-finite gradient in `{segment}`[{index}]; lower the learning rate or shorten sequences"
            )),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("json: {e}"))
    }
}
