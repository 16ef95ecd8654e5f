//! Closed-loop benchmark of the quadrotor controllers on an obstacle-avoidance
//! tracking mission: scenario configuration, seeded disturbances, simulation,
//! metrics and file output.

pub mod config;
pub mod disturbance;
pub mod reference;
pub mod report;
pub mod sim;
pub mod telemetry;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{ControllerKind, DisturbanceMode, PlantKind, ScenarioConfig};
pub use sim::{run_closed_loop, run_scenario, RunOutcome, ScenarioRun};
pub use telemetry::{compute_metrics, MetricsSummary, TelemetryRecord};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] sdc_mpc::model::ModelError),
    #[error(transparent)]
    Mpc(#[from] sdc_mpc::mpc::MpcError),
    #[error(transparent)]
    Observer(#[from] sdc_mpc::observer::ObserverError),
    #[error("telemetry is empty")]
    EmptyTelemetry,
    #[error("no runs found under {0}")]
    NoRuns(PathBuf),
}

impl BenchError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
