//! Per-layer reset probes on a trained model.
//!
//! Re-initialization puts one encoder layer back to its exact step-0 values;
//! re-randomization redraws it from the same init distributions under a
//! fresh seed. Each layer is reset on its own fresh copy of the trained
//! model and evaluated, and the layers are then ranked from most ambient
//! (smallest post-reset error) to most critical.

use std::fmt;
use std::str::FromStr;

use crate::model::{ModelError, ParamStore};
use crate::train::{evaluate, Dataset, EvalReport, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResetMode {
    Reinit,
    Rerand,
}

impl ResetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResetMode::Reinit => "reinit",
            ResetMode::Rerand => "rerand",
        }
    }
}

impl fmt::Display for ResetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResetMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reinit" => Ok(ResetMode::Reinit),
            "rerand" => Ok(ResetMode::Rerand),
            other => Err(format!("unknown reset mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AblationError {
    #[error("layer {layer} out of range for {num_layers} encoder layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("re-randomization needs at least one seed")]
    NoSeeds,
    #[error("epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn check_layer(store: &ParamStore, layer: usize) -> Result<(), AblationError> {
    let num_layers = store.config().num_layers;
    if layer >= num_layers {
        return Err(AblationError::LayerOutOfRange { layer, num_layers });
    }
    Ok(())
}

/// `trained` with every tensor of encoder layer `layer` copied from `initial`.
pub fn reinit_layer(trained: &ParamStore, initial: &ParamStore, layer: usize) -> Result<ParamStore, AblationError> {
    trained.check_compatible(initial)?;
    check_layer(trained, layer)?;
    let mut out = trained.clone();
    for key in trained.layer_keys(layer) {
        out.set_tensor(key, initial.tensor(key)?.clone())?;
    }
    Ok(out)
}

/// `trained` with every tensor of encoder layer `layer` redrawn from its
/// init distribution, using `fresh_seed` in place of the root seed.
pub fn rerand_layer(trained: &ParamStore, layer: usize, fresh_seed: u64) -> Result<ParamStore, AblationError> {
    check_layer(trained, layer)?;
    let mut out = trained.clone();
    for (key, entry) in trained.iter().filter(|(k, _)| k.slot.encoder_index() == Some(layer)) {
        out.set_tensor(key, entry.init.sample_with_root(entry.tensor.shape(), fresh_seed))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub mode: ResetMode,
    pub baseline: EvalReport,
    /// Report after resetting exactly layer `d`, at index `d`. For
    /// re-randomization with several seeds, error and loss are averaged.
    pub per_layer: Vec<EvalReport>,
    /// Raw re-randomization reports, `per_seed[s][d]`; empty for re-init.
    pub per_seed: Vec<Vec<EvalReport>>,
    pub seeds: Vec<u64>,
}

impl AblationResult {
    pub fn errors(&self) -> Vec<f64> {
        self.per_layer.iter().map(|r| r.error_rate).collect()
    }

    /// Largest minus smallest post-reset error across layers.
    pub fn spread(&self) -> f64 {
        let e = self.errors();
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = e.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Mean over layers of post-reset error minus baseline error.
    pub fn mean_degradation(&self) -> f64 {
        let e = self.errors();
        e.iter().map(|v| v - self.baseline.error_rate).sum::<f64>() / e.len() as f64
    }
}

fn mean_report(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len() as f64;
    EvalReport {
        error_rate: reports.iter().map(|r| r.error_rate).sum::<f64>() / n,
        mean_loss: reports.iter().map(|r| r.mean_loss).sum::<f64>() / n,
        num_examples: reports[0].num_examples,
    }
}

/// Baseline evaluation plus one evaluation per encoder layer, each on a
/// fresh single-layer reset of `trained`.
pub fn ablation_sweep(
    trained: &ParamStore,
    initial: &ParamStore,
    eval_data: &Dataset,
    mode: ResetMode,
    seeds: &[u64],
) -> Result<AblationResult, AblationError> {
    trained.check_compatible(initial)?;
    let baseline = evaluate(trained, eval_data)?;
    let layers = trained.config().num_layers;
    match mode {
        ResetMode::Reinit => {
            let per_layer = (0..layers)
                .map(|d| Ok(evaluate(&reinit_layer(trained, initial, d)?, eval_data)?))
                .collect::<Result<Vec<_>, AblationError>>()?;
            Ok(AblationResult {
                mode,
                baseline,
                per_layer,
                per_seed: Vec::new(),
                seeds: Vec::new(),
            })
        }
        ResetMode::Rerand => {
            if seeds.is_empty() {
                return Err(AblationError::NoSeeds);
            }
            let per_seed = seeds
                .iter()
                .map(|&s| {
                    (0..layers)
                        .map(|d| Ok(evaluate(&rerand_layer(trained, d, s)?, eval_data)?))
                        .collect::<Result<Vec<_>, AblationError>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            let per_layer = (0..layers)
                .map(|d| mean_report(&per_seed.iter().map(|row| row[d]).collect::<Vec<_>>()))
                .collect();
            Ok(AblationResult {
                mode,
                baseline,
                per_layer,
                per_seed,
                seeds: seeds.to_vec(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerClassification {
    /// Layers by ascending post-reset error: most ambient first. Ties go to
    /// the lower layer index.
    pub ranking: Vec<usize>,
    pub ambient: Vec<usize>,
    pub critical: Vec<usize>,
    pub epsilon: f64,
}

impl LayerClassification {
    pub fn num_layers(&self) -> usize {
        self.ranking.len()
    }

    /// The `n` most ambient layers.
    pub fn most_ambient(&self, n: usize) -> &[usize] {
        &self.ranking[..n.min(self.ranking.len())]
    }

    /// The `n` most critical layers, most critical first.
    pub fn most_critical(&self, n: usize) -> Vec<usize> {
        self.ranking.iter().rev().take(n).copied().collect()
    }
}

pub const DEFAULT_EPSILON: f64 = 0.10;

/// Ambient layers are those whose post-reset error is at most
/// `baseline · (1 + epsilon)`; the rest are critical.
pub fn classify_layers(result: &AblationResult, epsilon: f64) -> Result<LayerClassification, AblationError> {
    if !(epsilon >= 0.0) {
        return Err(AblationError::NegativeEpsilon(epsilon));
    }
    let errors = result.errors();
    let mut ranking: Vec<usize> = (0..errors.len()).collect();
    ranking.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    let threshold = result.baseline.error_rate * (1.0 + epsilon);
    let (ambient, critical): (Vec<usize>, Vec<usize>) = (0..errors.len()).partition(|&d| errors[d] <= threshold);
    Ok(LayerClassification {
        ranking,
        ambient,
        critical,
        epsilon,
    })
}
