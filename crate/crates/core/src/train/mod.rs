//! Synthetic data, the centralized training loop and evaluation.

mod data;

pub use data::{make_dataset, Dataset, Split, SyntheticTaskSpec};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::model::{forward, loss_and_grads, ModelError, ParamKey, ParamStore, Role};
use crate::numerics::{cross_entropy, NormMode, Tensor};
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr } => lr,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Steps after which a snapshot is kept, in addition to step 0.
    pub snapshot_steps: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            batch_size: 16,
            total_steps: 600,
            snapshot_steps: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if let Some(s) = self.snapshot_steps.iter().find(|&&s| s > self.total_steps) {
            return Err(TrainError::InvalidConfig(format!(
                "snapshot step {s} beyond total_steps {}",
                self.total_steps
            )));
        }
        if !(self.optimizer.lr() >= 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Endless stream of batch indices: a fresh seeded permutation per epoch,
/// consumed in order.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: rng::Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: rng::seeded(rng::derive_str(seed, "batches")),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct AdamState {
    m: BTreeMap<ParamKey, Vec<f64>>,
    v: BTreeMap<ParamKey, Vec<f64>>,
    t: i32,
}

/// Applies one optimizer step in place.
fn apply_step(
    params: &mut ParamStore,
    grads: &BTreeMap<ParamKey, Tensor>,
    optimizer: &Optimizer,
    adam: &mut AdamState,
) {
    adam.t += 1;
    for (key, entry) in params.entries_mut().iter_mut() {
        if entry.role != Role::Weight {
            continue;
        }
        let g = grads[key].data();
        let p = entry.tensor.data_mut();
        match *optimizer {
            Optimizer::Sgd { lr } => {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= lr * gv;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let m = adam.m.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
                let v = adam.v.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
                let c1 = 1.0 - beta1.powi(adam.t);
                let c2 = 1.0 - beta2.powi(adam.t);
                for i in 0..g.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

pub struct TrainOutcome {
    pub params: ParamStore,
    /// Deep copies keyed by the number of completed steps; always holds 0.
    pub snapshots: BTreeMap<usize, ParamStore>,
    pub losses: Vec<f64>,
}

/// Minimizes cross-entropy on `dataset` starting from `params`.
/// Deterministic in `(params, dataset, cfg)`.
pub fn train(params: &ParamStore, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut current = params.clone();
    let mut snapshots = BTreeMap::new();
    snapshots.insert(0, current.clone());
    let mut sampler = BatchSampler::new(dataset.len(), cfg.seed);
    let mut adam = AdamState {
        m: BTreeMap::new(),
        v: BTreeMap::new(),
        t: 0,
    };
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let (x, y) = dataset.batch(&idx);
        let out = loss_and_grads(&current, &x, &y, NormMode::Train).map_err(|e| match e {
            ModelError::Numerics(n) => TrainError::Diverged {
                step,
                reason: n.to_string(),
            },
            other => TrainError::Model(other),
        })?;
        if !out.loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: "non-finite loss".into(),
            });
        }
        losses.push(out.loss);
        apply_step(&mut current, &out.grads, &cfg.optimizer, &mut adam);
        if current.iter().any(|(_, e)| e.tensor.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Diverged {
                step,
                reason: "non-finite parameter".into(),
            });
        }
        for (key, value) in out.running_stats {
            current.set_tensor(&key, value)?;
        }
        if cfg.snapshot_steps.contains(&(step + 1)) {
            snapshots.insert(step + 1, current.clone());
        }
    }
    Ok(TrainOutcome {
        params: current,
        snapshots,
        losses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub error_rate: f64,
    pub mean_loss: f64,
    pub num_examples: usize,
}

const EVAL_BATCH: usize = 64;

/// Classification error and mean loss in eval mode, reduced over batches
/// in index order.
pub fn evaluate(params: &ParamStore, dataset: &Dataset) -> Result<EvalReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut wrong = 0usize;
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk);
        let logits = forward(params, &x, NormMode::Eval, false)?.logits;
        let k = logits.cols();
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            // first maximal index wins ties
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if pred != label {
                wrong += 1;
            }
        }
        loss_sum += cross_entropy(&logits, &y).map_err(ModelError::from)? * chunk.len() as f64;
    }
    let n = dataset.len();
    Ok(EvalReport {
        error_rate: wrong as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
        num_examples: n,
    })
}

#[cfg(test)]
mod tests;
