//! Batch driver: configuration, dispatch and deterministic output writing.

pub mod config;
pub mod output;
pub mod run;

use thiserror::Error;

pub use config::{parse_config, parse_config_str, ExperimentConfig, ModelKind, ParsedConfig};
pub use output::{write_outputs, Manifest, ManifestEntry};
pub use run::{run_experiment, Artifact, RunOutput};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("solver error: {0}")]
    Solver(#[from] mesoflow::Error),
    #[error("output error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for everything raised while running or writing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) | CliError::Io(_) => 3,
        }
    }
}
