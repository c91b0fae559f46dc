//! Conformer-lite encoder with a mean-pooled linear classifier head.
//!
//! Each encoder layer applies a half-step FFN, then self-attention and the
//! convolution module in the configured order, a second half-step FFN and a
//! final normalization. Every module sits on a residual connection.

mod config;
mod forward;
mod params;

pub use config::{LayerOrder, ModelConfig, NormKind, SizePreset};
pub use forward::{forward, loss_and_grads, ForwardOutput, LossAndGrads, Trace};
pub use params::{
    count_params, encoder_param_count, full_layout, init_model, layer_layout, outer_layout,
    outer_param_count, Entry, Granularity, InitKind, InitSpec, Module, ParamCounts, ParamKey,
    ParamStore, Role, Slot, TensorLayout, BATCH_NORM_SITES, NORM_SITES,
};

use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown tensor `{0}`")]
    UnknownKey(String),
    #[error("tensor `{key}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        key: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter stores come from different configs")]
    ConfigMismatch,
    #[error("bad model input: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[cfg(test)]
mod tests;
