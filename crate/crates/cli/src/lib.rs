//! Experiment runner behind the `rdlab` binary.
//!
//! Each subcommand turns an [`config::ExperimentConfig`] into a
//! [`output::ResultBundle`] plus the CSV tables and SVG plots derived from
//! it; [`commands::emit`] writes them to the output directory.

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;

use rdlab::analysis::AnalysisError;
use rdlab::newton::NewtonError;
use rdlab::steppers::StepperError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

impl CliError {
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_NUMERICAL: i32 = 3;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Numerical(_) => Self::EXIT_NUMERICAL,
            CliError::Io(..) => 1,
        }
    }
}

// Precondition violations that slipped past config validation are still
// the caller's input, so they map to the config exit code.

impl From<StepperError> for CliError {
    fn from(e: StepperError) -> Self {
        match e {
            StepperError::InvalidRequest(_)
            | StepperError::IncompatibleStepper { .. }
            | StepperError::Unsupported(_)
            | StepperError::Discretize(_) => CliError::Config(e.to_string()),
            StepperError::BlowUp { .. }
            | StepperError::StepUnderflow { .. }
            | StepperError::Linalg(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<NewtonError> for CliError {
    fn from(e: NewtonError) -> Self {
        match e {
            NewtonError::InvalidRequest(_) | NewtonError::Discretize(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Stepper(inner) => inner.into(),
            AnalysisError::InvalidRequest(_)
            | AnalysisError::Unsupported(_)
            | AnalysisError::Discretize(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
