use std::path::PathBuf;

use thiserror::Error;
use tractjoint::clustering::ClusteringError;
use tractjoint::geometry::GeometryError;
use tractjoint::gradcheck::BatteryError;
use tractjoint::io::config::ConfigError;
use tractjoint::io::labels::LabelError;
use tractjoint::io::tck::TckError;
use tractjoint::metrics::MetricsError;
use tractjoint::model::ModelError;
use tractjoint::registration::RegistrationError;
use tractjoint::training::TrainError;
use tractjoint_autodiff::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Tck { path: PathBuf, source: TckError },
    #[error("{path}: {source}")]
    Labels { path: PathBuf, source: LabelError },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("synthetic spec line {line}: {message}")]
    Spec { line: usize, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Battery(#[from] BatteryError),
    #[error("gradient check failed for: {0}")]
    GradCheckFailed(String),
    #[error("could not serialize output: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for bad input from the user, 2 for failures of the computation itself.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Train(TrainError::Diverged { .. } | TrainError::Tensor(_))
            | CliError::Battery(_)
            | CliError::GradCheckFailed(_)
            | CliError::Json(_) => 2,
            _ => 1,
        }
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
