use sqfc::bandwidth::CvError;
use sqfc::detrend::DetrendError;
use sqfc::inference::InferenceError;
use sqfc::kernels::KernelError;
use sqfc::loss::LossError;
use sqfc::simulate::SimError;
use sqfc::{DatasetError, FitError};
use thiserror::Error;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv: {e}"))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::InvalidBandwidth(_) | FitError::InvalidGrid | FitError::DimensionMismatch { .. } | FitError::OutOfHull { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CvError> for CliError {
    fn from(e: CvError) -> Self {
        match e {
            CvError::InvalidGrid | CvError::InvalidLeaveOut | CvError::InvalidSubset(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::InvalidLevel(_) | InferenceError::InvalidSubset(_) | InferenceError::WrongLoss { .. } => CliError::Usage(e.to_string()),
            InferenceError::Fit(f) => f.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DetrendError> for CliError {
    fn from(e: DetrendError) -> Self {
        match e {
            DetrendError::InvalidBandwidth(_) => CliError::Usage(e.to_string()),
            DetrendError::EmptyWindow { .. } => CliError::Numerical(e.to_string()),
            DetrendError::NotPlanar(_) | DetrendError::ShapeMismatch => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Usage(e.to_string())
    }
}
