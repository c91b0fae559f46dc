use std::fmt::Write as _;

use super::{build_mask, fl_train, params_dropped_fraction, shard_clients, DropoutSchedule, FLConfig, FlError};
use crate::ablation::{ablation_sweep, classify_layers, AblationResult, LayerClassification, ResetMode};
use crate::churn::sig9;
use crate::model::{init_model, ModelConfig, ParamStore};
use crate::train::{make_dataset, train, Split, SyntheticTaskSpec, TrainConfig};

/// Centralized pretraining on a source domain, then federated training on
/// a target domain once per dropout schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferSetup {
    pub model: ModelConfig,
    pub root_seed: u64,
    pub source: SyntheticTaskSpec,
    pub target: SyntheticTaskSpec,
    pub pretrain: TrainConfig,
    pub data_seed: u64,
    pub source_train_examples: usize,
    pub source_eval_examples: usize,
    pub target_train_examples: usize,
    pub target_eval_examples: usize,
    pub ablation_seeds: Vec<u64>,
    pub epsilon: f64,
    pub fl: FLConfig,
}

impl TransferSetup {
    pub fn validate(&self) -> Result<(), FlError> {
        self.model.validate()?;
        for task in [&self.source, &self.target] {
            task.validate().map_err(FlError::InvalidConfig)?;
        }
        if self.source.domain_transform_seed == self.target.domain_transform_seed {
            return Err(FlError::InvalidConfig("source and target domains must differ".into()));
        }
        if self.source_train_examples == 0 || self.source_eval_examples == 0 || self.target_eval_examples == 0 {
            return Err(FlError::InvalidConfig("dataset sizes must be positive".into()));
        }
        self.pretrain.validate()?;
        self.fl.validate()
    }
}

/// The source-domain model and its layer ranking, fixed for all schedules.
#[derive(Clone, Debug)]
pub struct PretrainedBase {
    pub initial: ParamStore,
    pub trained: ParamStore,
    pub ablation: AblationResult,
    pub classification: LayerClassification,
}

pub fn pretrain_base(setup: &TransferSetup) -> Result<PretrainedBase, FlError> {
    setup.validate()?;
    let initial = init_model(&setup.model, setup.root_seed)?;
    let train_data = make_dataset(&setup.source, Split::Train, setup.source_train_examples, setup.data_seed);
    let eval_data = make_dataset(&setup.source, Split::Eval, setup.source_eval_examples, setup.data_seed);
    let trained = train(&initial, &train_data, &setup.pretrain)?.params;
    rank_base(setup, initial, trained, &eval_data)
}

/// Ranks the layers of an already trained source model by a
/// re-randomization sweep on source-domain eval data.
pub fn base_from_trained(setup: &TransferSetup, initial: ParamStore, trained: ParamStore) -> Result<PretrainedBase, FlError> {
    setup.validate()?;
    let eval_data = make_dataset(&setup.source, Split::Eval, setup.source_eval_examples, setup.data_seed);
    rank_base(setup, initial, trained, &eval_data)
}

fn rank_base(
    setup: &TransferSetup,
    initial: ParamStore,
    trained: ParamStore,
    eval_data: &crate::train::Dataset,
) -> Result<PretrainedBase, FlError> {
    let ablation = ablation_sweep(&trained, &initial, eval_data, ResetMode::Rerand, &setup.ablation_seeds)?;
    let classification = classify_layers(&ablation, setup.epsilon)?;
    Ok(PretrainedBase {
        initial,
        trained,
        ablation,
        classification,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub schedule: DropoutSchedule,
    pub params_dropped: f64,
    pub eval_error: f64,
    pub seed: u64,
}

/// One federated run per schedule from the same base model. A `none` row
/// is added first when the list lacks one.
pub fn run_schedules(
    setup: &TransferSetup,
    base: &PretrainedBase,
    schedules: &[DropoutSchedule],
) -> Result<Vec<TransferRow>, FlError> {
    setup.validate()?;
    let mut all: Vec<DropoutSchedule> = Vec::new();
    if !schedules.iter().any(DropoutSchedule::is_none) {
        all.push(DropoutSchedule::None);
    }
    all.extend_from_slice(schedules);
    let target_train = make_dataset(&setup.target, Split::Train, setup.target_train_examples, setup.data_seed);
    let target_eval = make_dataset(&setup.target, Split::Eval, setup.target_eval_examples, setup.data_seed);
    let shards = shard_clients(&target_train, setup.fl.num_clients, setup.fl.seed)?;
    all.iter()
        .map(|schedule| {
            let (_, reports) = fl_train(
                &base.trained,
                &shards,
                &setup.fl,
                schedule,
                &base.classification,
                &target_eval,
            )?;
            // The dropped count depends only on unit counts, not on which
            // units a seed picks.
            let mask = build_mask(schedule, &base.classification, &setup.model, 0)?;
            Ok(TransferRow {
                schedule: *schedule,
                params_dropped: params_dropped_fraction(&mask, &setup.model)?,
                eval_error: reports.last().expect("at least one round").eval_error,
                seed: setup.root_seed,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub base: PretrainedBase,
    pub rows: Vec<TransferRow>,
}

pub fn domain_transfer_experiment(
    setup: &TransferSetup,
    schedules: &[DropoutSchedule],
) -> Result<TransferOutcome, FlError> {
    let base = pretrain_base(setup)?;
    let rows = run_schedules(setup, &base, schedules)?;
    Ok(TransferOutcome { base, rows })
}

/// `schedule,params_dropped,eval_error,seed`
pub fn fl_csv(rows: &[TransferRow]) -> String {
    let mut s = String::from("schedule,params_dropped,eval_error,seed\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.schedule, sig9(r.params_dropped), sig9(r.eval_error), r.seed).unwrap();
    }
    s
}
