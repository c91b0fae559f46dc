use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{build_mask, coverage, embed_update, extract_submodel, params_dropped_fraction, DropoutSchedule, FlError};
use crate::ablation::LayerClassification;
use crate::model::{ParamKey, ParamStore};
use crate::numerics::Tensor;
use crate::rng;
use crate::train::{evaluate, train, Dataset, Optimizer, TrainConfig};

/// Full-size tensors keyed like the model.
pub type Delta = BTreeMap<ParamKey, Tensor>;
/// Per-coordinate participation flags keyed like the model.
pub type Coverage = BTreeMap<ParamKey, Vec<bool>>;

#[derive(Clone, Debug, PartialEq)]
pub struct FLConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub num_rounds: usize,
    pub client_steps: usize,
    pub client_lr: f64,
    pub client_batch_size: usize,
    pub seed: u64,
}

impl Default for FLConfig {
    fn default() -> Self {
        Self {
            num_clients: 8,
            clients_per_round: 4,
            num_rounds: 10,
            client_steps: 5,
            client_lr: 0.05,
            client_batch_size: 16,
            seed: 0,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        let bad = |m: &str| Err(FlError::InvalidConfig(m.into()));
        if self.num_clients == 0 || self.clients_per_round == 0 || self.num_rounds == 0 || self.client_steps == 0 {
            return bad("clients, clients_per_round, rounds and client_steps must all be at least 1");
        }
        if self.clients_per_round > self.num_clients {
            return bad("clients_per_round exceeds num_clients");
        }
        if self.client_batch_size == 0 {
            return bad("client_batch_size must be positive");
        }
        if !(self.client_lr >= 0.0) {
            return bad("client_lr must be non-negative");
        }
        Ok(())
    }

    fn round_seed(&self, round: usize) -> u64 {
        rng::derive_index(self.seed, "round", round as u64)
    }

    fn client_seed(&self, round: usize, client: usize) -> u64 {
        rng::derive_index(self.round_seed(round), "client", client as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<usize>,
    /// Mean over participating clients of their mean local training loss.
    pub mean_client_loss: f64,
    pub eval_error: f64,
    /// Mean over participating clients.
    pub params_dropped_fraction: f64,
}

/// Disjoint shards covering the dataset, sizes within one of each other.
/// Examples are assigned by a seeded permutation; each shard keeps dataset
/// order, so a single shard equals the dataset.
pub fn shard_clients(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<Dataset>, FlError> {
    if num_clients == 0 || dataset.len() < num_clients {
        return Err(FlError::TooFewExamples {
            examples: dataset.len(),
            clients: num_clients,
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive_str(seed, "shards")));
    let base = dataset.len() / num_clients;
    let extra = dataset.len() % num_clients;
    let mut start = 0;
    let mut shards = Vec::with_capacity(num_clients);
    for c in 0..num_clients {
        let size = base + usize::from(c < extra);
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        shards.push(dataset.subset(&idx));
        start += size;
    }
    Ok(shards)
}

/// Client ids taking part in `round`, ascending.
pub fn sample_clients(cfg: &FLConfig, round: usize) -> Vec<usize> {
    let mut r = rng::seeded(rng::derive_str(cfg.round_seed(round), "clients"));
    let mut ids = rand::seq::index::sample(&mut r, cfg.num_clients, cfg.clients_per_round).into_vec();
    ids.sort_unstable();
    ids
}

/// Local training settings for one client in one round.
pub fn client_train_config(cfg: &FLConfig, round: usize, client: usize) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::Sgd { lr: cfg.client_lr },
        batch_size: cfg.client_batch_size,
        total_steps: cfg.client_steps,
        snapshot_steps: Vec::new(),
        seed: cfg.client_seed(round, client),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Example count.
    pub weight: f64,
    pub values: Delta,
    pub coverage: Coverage,
}

/// Per coordinate, the weighted mean over the clients that cover it, with
/// weights renormalized over those clients. Clients are reduced in id
/// order. Uncovered coordinates take `fallback`'s value, or zero.
fn weighted_mean(updates: &[ClientUpdate], fallback: Option<&Delta>) -> Result<Delta, FlError> {
    let first = updates.first().ok_or(FlError::NoUpdates)?;
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut out = Delta::new();
    for (key, t) in &first.values {
        let cols: Vec<(f64, &[f64], &[bool])> = order
            .iter()
            .map(|u| (u.weight, u.values[key].data(), u.coverage[key].as_slice()))
            .collect();
        let fallback = fallback.map(|f| f[key].data());
        let mut data = vec![0.0; t.numel()];
        for (i, slot) in data.iter_mut().enumerate() {
            // running weighted mean: identical inputs give back that value exactly
            let mut acc: Option<f64> = None;
            let mut seen = 0.0;
            for &(w, v, _) in cols.iter().filter(|c| c.2[i]) {
                seen += w;
                acc = Some(match acc {
                    None => v[i],
                    Some(m) if seen > 0.0 => m + (w / seen) * (v[i] - m),
                    Some(m) => m,
                });
            }
            if acc.is_some() && !(seen > 0.0) {
                return Err(FlError::ZeroWeight);
            }
            *slot = match (acc, fallback) {
                (Some(v), _) => v,
                (None, Some(f)) => f[i],
                (None, None) => 0.0,
            };
        }
        out.insert(key.clone(), Tensor::from_parts(t.shape().to_vec(), data));
    }
    Ok(out)
}

fn check_updates(updates: &[ClientUpdate]) -> Result<(), FlError> {
    let first = updates.first().ok_or(FlError::NoUpdates)?;
    for u in updates {
        if !(u.weight >= 0.0) {
            return Err(FlError::InvalidConfig(format!("client {} has weight {}", u.client_id, u.weight)));
        }
        let same = u.values.len() == first.values.len()
            && u.values.iter().zip(&first.values).all(|((ka, a), (kb, b))| {
                ka == kb && a.shape() == b.shape() && u.coverage.get(ka).is_some_and(|c| c.len() == a.numel())
            });
        if !same {
            return Err(FlError::MaskMismatch(format!("client {} update has a different layout", u.client_id)));
        }
    }
    if updates.iter().map(|u| u.weight).sum::<f64>() == 0.0 {
        return Err(FlError::ZeroWeight);
    }
    Ok(())
}

/// Server delta: the example-weighted mean of client deltas, per
/// coordinate over the clients that kept it; zero where no client did.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Delta, FlError> {
    check_updates(updates)?;
    weighted_mean(updates, None)
}

/// Runs federated rounds from `server`. Each round samples clients, gives
/// each a submodel cut by its own mask, trains it with local SGD and
/// averages the returned weights into the server per coordinate. Averaging
/// weights and applying the mean delta with server rate 1 are the same
/// update; the weight form keeps the single-client case exact.
pub fn fl_train(
    server: &ParamStore,
    shards: &[Dataset],
    cfg: &FLConfig,
    schedule: &DropoutSchedule,
    classification: &LayerClassification,
    eval: &Dataset,
) -> Result<(ParamStore, Vec<RoundReport>), FlError> {
    cfg.validate()?;
    if shards.len() != cfg.num_clients {
        return Err(FlError::InvalidConfig(format!(
            "{} shards for {} clients",
            shards.len(),
            cfg.num_clients
        )));
    }
    let model = server.config().clone();
    schedule.validate(model.num_layers)?;
    let mut current = server.clone();
    let mut reports = Vec::with_capacity(cfg.num_rounds);
    for round in 0..cfg.num_rounds {
        let clients = sample_clients(cfg, round);
        let mut updates = Vec::with_capacity(clients.len());
        let mut loss_sum = 0.0;
        let mut dropped_sum = 0.0;
        for &c in &clients {
            let mask = build_mask(schedule, classification, &model, cfg.client_seed(round, c))?;
            dropped_sum += params_dropped_fraction(&mask, &model)?;
            let sub = extract_submodel(&current, &mask)?;
            let out = train(&sub, &shards[c], &client_train_config(cfg, round, c))?;
            loss_sum += out.losses.iter().sum::<f64>() / out.losses.len() as f64;
            let sub_values: Delta = out.params.iter().map(|(k, e)| (k.clone(), e.tensor.clone())).collect();
            updates.push(ClientUpdate {
                client_id: c,
                weight: shards[c].len() as f64,
                values: embed_update(&current, &mask, &sub_values)?,
                coverage: coverage(&current, &mask)?,
            });
        }
        check_updates(&updates)?;
        let server_values: Delta = current.iter().map(|(k, e)| (k.clone(), e.tensor.clone())).collect();
        for (key, t) in weighted_mean(&updates, Some(&server_values))? {
            current.set_tensor(&key, t)?;
        }
        let n = clients.len() as f64;
        reports.push(RoundReport {
            round,
            mean_client_loss: loss_sum / n,
            eval_error: evaluate(&current, eval)?.error_rate,
            params_dropped_fraction: dropped_sum / n,
            clients,
        });
    }
    Ok((current, reports))
}
