//! Experiment harness behind the `qse` binary: run configuration, training,
//! evaluation, sequence replay, exhaustive search and histograms.

pub mod commands;
pub mod config;

use qse_core::agent::AgentError;
use qse_core::nn::NnError;
use qse_core::sequence::SequenceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Budget(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Budget(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<SequenceError> for CliError {
    fn from(e: SequenceError) -> Self {
        match e {
            SequenceError::BudgetExceeded { .. } => CliError::Budget(e.to_string()),
            SequenceError::Parse { .. } | SequenceError::Invalid(_) => {
                CliError::Config(e.to_string())
            }
            SequenceError::Record { .. } => CliError::Config(e.to_string()),
            SequenceError::Io(io) => CliError::Io(io),
            SequenceError::Underflow { .. } | SequenceError::Model(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::InvalidConfig(m) => CliError::Config(m),
            AgentError::Nn(NnError::Io(io)) => CliError::Io(io),
            AgentError::Nn(NnError::SchemaMismatch(m)) => CliError::Config(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(io) => CliError::Io(io),
            NnError::SchemaMismatch(_) | NnError::ShapeMismatch(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}
