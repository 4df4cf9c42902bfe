use std::fmt;

use csi_core::datamodel::DataError;
use csi_core::experiment::ExperimentError;
use csi_core::pipeline::PipelineError;
use csi_core::stratify::StratifyError;

pub const CONFIG: i32 = 2;
pub const DATA: i32 = 3;

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        Self {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        ExperimentError::from(e).into()
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        ExperimentError::from(e).into()
    }
}

impl From<StratifyError> for CliError {
    fn from(e: StratifyError) -> Self {
        ExperimentError::from(e).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;
