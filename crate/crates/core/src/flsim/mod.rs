//! Federated averaging over simulated clients, with Federated Dropout
//! targeted at the most ambient or most critical layers.
//!
//! Dropout is structured: a client receives a dense submodel with whole FFN
//! hidden units, attention heads and convolution units sliced out, trains
//! it locally, and its update is scattered back into full-size tensors.
//! The server averages each coordinate over the clients that kept it.

mod fedavg;
mod mask;
mod schedule;
mod transfer;

pub use fedavg::{
    aggregate, client_train_config, fl_train, sample_clients, shard_clients, ClientUpdate, Coverage, Delta,
    FLConfig, RoundReport,
};
pub use mask::{
    build_mask, coverage, dropped_param_count, embed_update, extract_submodel, params_dropped_fraction,
    unit_counts, zero_dropped, LayerMask, SubmodelMask, UnitCounts,
};
pub use schedule::DropoutSchedule;
pub use transfer::{
    base_from_trained, domain_transfer_experiment, fl_csv, pretrain_base, run_schedules, PretrainedBase, TransferOutcome, TransferRow,
    TransferSetup,
};

use crate::ablation::AblationError;
use crate::model::ModelError;
use crate::train::TrainError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlError {
    #[error("invalid federated config: {0}")]
    InvalidConfig(String),
    #[error("invalid dropout schedule: {0}")]
    InvalidSchedule(String),
    #[error("cannot shard {examples} examples over {clients} clients")]
    TooFewExamples { examples: usize, clients: usize },
    #[error("mask does not match model: {0}")]
    MaskMismatch(String),
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("client weights sum to zero")]
    ZeroWeight,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
}
