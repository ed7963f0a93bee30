use densify_core::eval::EvalError;
use densify_core::geometry::GeometryError;
use densify_core::io::IoError;
use densify_core::model::ModelError;
use densify_core::nn::NnError;
use densify_core::sampling::SampleError;
use densify_core::train::TrainError;
use thiserror::Error;

/// Failure surfaced to the shell. The variant fixes the process exit code:
/// usage errors exit 1, data and format errors 2, numeric failures 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> CliError {
        match e {
            NnError::Numeric(m) => CliError::Numeric(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        match e {
            ModelError::Nn(n) => n.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Numeric(m) => CliError::Numeric(m),
            TrainError::Nn(n) => n.into(),
            TrainError::Model(m) => m.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}
