//! Experiment driver: text configs, binary checkpoints, the per-command
//! pipelines and the preset bundles.

pub mod checkpoint;
mod commands;
mod config;
mod presets;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use commands::{
    ablation_csv, cmd_ablate, cmd_churn, cmd_fl, cmd_report, cmd_train, load_run, run_pipeline, LayerSpread, RunDir,
};
pub use config::{AblationSettings, ConfigError, ExperimentConfig, FlSettings, TaskSettings};
pub use presets::{preset_experiments, run_preset, Preset, PRESET_NAMES};

use crate::ablation::AblationError;
use crate::flsim::FlError;
use crate::model::ModelError;
use crate::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::UnknownPreset(_) => 2,
            _ => 1,
        }
    }
}
