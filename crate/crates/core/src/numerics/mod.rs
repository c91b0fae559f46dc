//! Minimal tensor algebra with reverse-mode differentiation, covering only
//! the operations the conformer encoder needs.

mod graph;
pub mod ops;
mod tensor;

pub use graph::{Graph, Var};
pub use ops::{
    batch_norm, conv1d_depthwise, conv1d_depthwise_batched, cross_entropy, glu, group_norm, layer_norm,
    matmul, mean_pool, softmax, swish, NormMode, RunningStats,
};
pub use tensor::Tensor;

/// Default epsilon for every normalizer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("depthwise kernel length must be odd, got {0}")]
    EvenKernel(usize),
    #[error("{channels} channels not divisible into {groups} groups")]
    GroupDivisibility { channels: usize, groups: usize },
    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("glu needs an even number of channels, got {0}")]
    OddGlu(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already differentiated; trace a new forward pass")]
    GraphConsumed,
}

#[cfg(test)]
mod gradcheck_tests;
