//! Experiment configuration as flat `key=value` text with dotted sections.
//!
//! One assignment per line, `#` starts a comment, no quoting. Lists are
//! comma separated. `model.size_preset` is applied before any explicit
//! `model.*` width keys, whatever the line order. Unknown or repeated keys
//! are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::ablation::{ResetMode, DEFAULT_EPSILON};
use crate::flsim::{DropoutSchedule, FLConfig, TransferSetup};
use crate::model::{LayerOrder, ModelConfig, NormKind, SizePreset};
use crate::train::{Optimizer, SyntheticTaskSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSettings {
    pub frames: usize,
    pub template_seed: u64,
    pub noise_std: f64,
    pub time_shift_max: usize,
    pub source_domain: Option<u64>,
    pub target_domain: Option<u64>,
    pub domain_shift: f64,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self {
            frames: 16,
            template_seed: 1,
            noise_std: 1.0,
            time_shift_max: 2,
            source_domain: None,
            target_domain: Some(7),
            domain_shift: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSettings {
    pub modes: Vec<ResetMode>,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            modes: vec![ResetMode::Rerand],
            epsilon: DEFAULT_EPSILON,
            seeds: vec![1001],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlSettings {
    pub fl: FLConfig,
    pub schedules: Vec<DropoutSchedule>,
    pub target_train_examples: usize,
    pub target_eval_examples: usize,
}

impl Default for FlSettings {
    fn default() -> Self {
        Self {
            fl: FLConfig::default(),
            schedules: vec![DropoutSchedule::None],
            target_train_examples: 800,
            target_eval_examples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub task: TaskSettings,
    pub train: TrainConfig,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub ablation: AblationSettings,
    /// Step of the snapshot compared against step 0; 0 means the final step.
    pub churn_step: usize,
    pub fl: FlSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            root_seed: 0,
            data_seed: 1,
            model: ModelConfig::preset(SizePreset::ToyL),
            task: TaskSettings::default(),
            train: TrainConfig {
                total_steps: 300,
                ..TrainConfig::default()
            },
            train_examples: 2000,
            eval_examples: 500,
            ablation: AblationSettings::default(),
            churn_step: 0,
            fl: FlSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given more than once")]
    Duplicate(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

fn optional_seed(key: &str, raw: &str) -> Result<Option<u64>, ConfigError> {
    if raw == "none" {
        Ok(None)
    } else {
        value(key, raw).map(Some)
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn show_seed(s: Option<u64>) -> String {
    s.map_or("none".to_string(), |v| v.to_string())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
        }
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = pairs.remove("model.size_preset") {
            if p == "none" {
                cfg.model.size_preset = None;
            } else {
                cfg.model = ModelConfig::preset(value("model.size_preset", &p)?);
            }
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.task;
        let fl = &mut self.fl;
        match key {
            "seed" => self.root_seed = value(key, v)?,
            "data_seed" => self.data_seed = value(key, v)?,
            "model.num_layers" => m.num_layers = value(key, v)?,
            "model.model_dim" => m.model_dim = value(key, v)?,
            "model.ffn_expansion" => m.ffn_expansion = value(key, v)?,
            "model.num_heads" => m.num_heads = value(key, v)?,
            "model.conv_kernel" => m.conv_kernel = value(key, v)?,
            "model.norm_kind" => m.norm_kind = value::<NormKind>(key, v)?,
            "model.group_count" => m.group_count = value(key, v)?,
            "model.layer_order" => m.layer_order = value::<LayerOrder>(key, v)?,
            "model.num_classes" => m.num_classes = value(key, v)?,
            "model.feature_dim" => m.feature_dim = value(key, v)?,
            "model.max_frames" => m.max_frames = value(key, v)?,
            "model.positional" => m.positional = value(key, v)?,
            "model.norm_eps" => m.norm_eps = value(key, v)?,
            "model.bn_momentum" => m.bn_momentum = value(key, v)?,
            "task.frames" => t.frames = value(key, v)?,
            "task.template_seed" => t.template_seed = value(key, v)?,
            "task.noise_std" => t.noise_std = value(key, v)?,
            "task.time_shift_max" => t.time_shift_max = value(key, v)?,
            "task.source_domain" => t.source_domain = optional_seed(key, v)?,
            "task.target_domain" => t.target_domain = optional_seed(key, v)?,
            "task.domain_shift" => t.domain_shift = value(key, v)?,
            "train.optimizer" => {
                let lr = self.train.optimizer.lr();
                self.train.optimizer = match v {
                    "adam" => Optimizer::adam(lr),
                    "sgd" => Optimizer::Sgd { lr },
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            msg: format!("expected adam or sgd, got `{v}`"),
                        })
                    }
                }
            }
            "train.lr" => {
                let lr: f64 = value(key, v)?;
                match &mut self.train.optimizer {
                    Optimizer::Adam { lr: l, .. } | Optimizer::Sgd { lr: l } => *l = lr,
                }
            }
            "train.batch_size" => self.train.batch_size = value(key, v)?,
            "train.total_steps" => self.train.total_steps = value(key, v)?,
            "train.snapshot_steps" => self.train.snapshot_steps = list(key, v)?,
            "train.train_examples" => self.train_examples = value(key, v)?,
            "train.eval_examples" => self.eval_examples = value(key, v)?,
            "ablation.modes" => self.ablation.modes = list(key, v)?,
            "ablation.epsilon" => self.ablation.epsilon = value(key, v)?,
            "ablation.seeds" => self.ablation.seeds = list(key, v)?,
            "churn.step" => self.churn_step = value(key, v)?,
            "fl.num_clients" => fl.fl.num_clients = value(key, v)?,
            "fl.clients_per_round" => fl.fl.clients_per_round = value(key, v)?,
            "fl.num_rounds" => fl.fl.num_rounds = value(key, v)?,
            "fl.client_steps" => fl.fl.client_steps = value(key, v)?,
            "fl.client_lr" => fl.fl.client_lr = value(key, v)?,
            "fl.client_batch_size" => fl.fl.client_batch_size = value(key, v)?,
            "fl.seed" => fl.fl.seed = value(key, v)?,
            "fl.schedules" => fl.schedules = list(key, v)?,
            "fl.target_train_examples" => fl.target_train_examples = value(key, v)?,
            "fl.target_eval_examples" => fl.target_eval_examples = value(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order; `parse` reads it back
    /// to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.task;
        let f = &self.fl;
        let (opt, lr) = match self.train.optimizer {
            Optimizer::Adam { lr, .. } => ("adam", lr),
            Optimizer::Sgd { lr } => ("sgd", lr),
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        put("seed", self.root_seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("model.size_preset", m.size_preset.map_or("none".to_string(), |p| p.to_string()));
        put("model.num_layers", m.num_layers.to_string());
        put("model.model_dim", m.model_dim.to_string());
        put("model.ffn_expansion", m.ffn_expansion.to_string());
        put("model.num_heads", m.num_heads.to_string());
        put("model.conv_kernel", m.conv_kernel.to_string());
        put("model.norm_kind", m.norm_kind.to_string());
        put("model.group_count", m.group_count.to_string());
        put("model.layer_order", m.layer_order.to_string());
        put("model.num_classes", m.num_classes.to_string());
        put("model.feature_dim", m.feature_dim.to_string());
        put("model.max_frames", m.max_frames.to_string());
        put("model.positional", m.positional.to_string());
        put("model.norm_eps", format!("{:e}", m.norm_eps));
        put("model.bn_momentum", m.bn_momentum.to_string());
        put("task.frames", t.frames.to_string());
        put("task.template_seed", t.template_seed.to_string());
        put("task.noise_std", t.noise_std.to_string());
        put("task.time_shift_max", t.time_shift_max.to_string());
        put("task.source_domain", show_seed(t.source_domain));
        put("task.target_domain", show_seed(t.target_domain));
        put("task.domain_shift", t.domain_shift.to_string());
        put("train.optimizer", opt.to_string());
        put("train.lr", lr.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.total_steps", self.train.total_steps.to_string());
        put("train.snapshot_steps", join(&self.train.snapshot_steps));
        put("train.train_examples", self.train_examples.to_string());
        put("train.eval_examples", self.eval_examples.to_string());
        put("ablation.modes", join(&self.ablation.modes));
        put("ablation.epsilon", self.ablation.epsilon.to_string());
        put("ablation.seeds", join(&self.ablation.seeds));
        put("churn.step", self.churn_step.to_string());
        put("fl.num_clients", f.fl.num_clients.to_string());
        put("fl.clients_per_round", f.fl.clients_per_round.to_string());
        put("fl.num_rounds", f.fl.num_rounds.to_string());
        put("fl.client_steps", f.fl.client_steps.to_string());
        put("fl.client_lr", f.fl.client_lr.to_string());
        put("fl.client_batch_size", f.fl.client_batch_size.to_string());
        put("fl.seed", f.fl.seed.to_string());
        put("fl.schedules", join(&f.schedules));
        put("fl.target_train_examples", f.target_train_examples.to_string());
        put("fl.target_eval_examples", f.target_eval_examples.to_string());
        s
    }

    pub fn source_task(&self) -> SyntheticTaskSpec {
        self.task_for(self.task.source_domain)
    }

    pub fn target_task(&self) -> SyntheticTaskSpec {
        self.task_for(self.task.target_domain)
    }

    fn task_for(&self, domain: Option<u64>) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_classes: self.model.num_classes,
            feature_dim: self.model.feature_dim,
            frames: self.task.frames,
            template_seed: self.task.template_seed,
            noise_std: self.task.noise_std,
            time_shift_max: self.task.time_shift_max,
            domain_transform_seed: domain,
            domain_shift: self.task.domain_shift,
        }
    }

    /// Training settings with the batch order seeded by the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.root_seed,
            ..self.train.clone()
        }
    }

    pub fn transfer_setup(&self) -> TransferSetup {
        TransferSetup {
            model: self.model.clone(),
            root_seed: self.root_seed,
            source: self.source_task(),
            target: self.target_task(),
            pretrain: self.train_config(),
            data_seed: self.data_seed,
            source_train_examples: self.train_examples,
            source_eval_examples: self.eval_examples,
            target_train_examples: self.fl.target_train_examples,
            target_eval_examples: self.fl.target_eval_examples,
            ablation_seeds: self.ablation.seeds.clone(),
            epsilon: self.ablation.epsilon,
            fl: FLConfig {
                seed: crate::rng::derive(self.fl.fl.seed, self.root_seed),
                ..self.fl.fl.clone()
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.source_task().validate().map_err(invalid)?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        if self.model.positional && self.task.frames > self.model.max_frames {
            return Err(invalid(format!(
                "task.frames {} exceeds model.max_frames {}",
                self.task.frames, self.model.max_frames
            )));
        }
        if self.train_examples == 0 || self.eval_examples == 0 {
            return Err(invalid("train.train_examples and train.eval_examples must be positive".into()));
        }
        if self.ablation.modes.is_empty() {
            return Err(invalid("ablation.modes is empty".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(invalid("ablation.seeds is empty".into()));
        }
        if !(self.ablation.epsilon >= 0.0) {
            return Err(invalid("ablation.epsilon must be non-negative".into()));
        }
        if self.churn_step > self.train.total_steps {
            return Err(invalid("churn.step exceeds train.total_steps".into()));
        }
        self.fl.fl.validate().map_err(|e| invalid(e.to_string()))?;
        for s in &self.fl.schedules {
            s.validate(self.model.num_layers).map_err(|e| invalid(e.to_string()))?;
        }
        if self.task.source_domain == self.task.target_domain {
            return Err(invalid("task.source_domain and task.target_domain must differ".into()));
        }
        if self.fl.target_train_examples < self.fl.fl.num_clients || self.fl.target_eval_examples == 0 {
            return Err(invalid("fl target datasets too small".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let empty = ExperimentConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(empty, cfg);
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "seed=9\nmodel.norm_kind=batch # comment\ntrain.optimizer=sgd\ntrain.lr=0.25\n\
                    train.snapshot_steps=10,20\nablation.modes=reinit,rerand\n\
                    fl.schedules=none,Amb-2@50%,Flat@20%\ntask.source_domain=3\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.root_seed, 9);
        assert_eq!(cfg.model.norm_kind, NormKind::Batch);
        assert_eq!(cfg.train.optimizer, Optimizer::Sgd { lr: 0.25 });
        assert_eq!(cfg.train.snapshot_steps, vec![10, 20]);
        assert_eq!(cfg.ablation.modes, vec![ResetMode::Reinit, ResetMode::Rerand]);
        assert_eq!(cfg.fl.schedules[1], DropoutSchedule::Ambient { n: 2, rate: 0.5 });
        assert_eq!(cfg.task.source_domain, Some(3));
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn size_preset_applies_before_explicit_widths() {
        let cfg = ExperimentConfig::parse("model.model_dim=20\nmodel.size_preset=toyS\n").unwrap();
        assert_eq!(cfg.model.num_layers, ModelConfig::preset(SizePreset::ToyS).num_layers);
        assert_eq!(cfg.model.model_dim, 20);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let bare = ExperimentConfig::parse("model.size_preset=none").unwrap();
        assert_eq!(bare.model.size_preset, None);
        assert_eq!(ExperimentConfig::parse(&bare.to_text()).unwrap(), bare);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ExperimentConfig::parse("model.depth=3"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::parse("seed=1\nseed=2"), Err(ConfigError::Duplicate(_))));
        assert!(matches!(ExperimentConfig::parse("seed"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("seed=x"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("model.conv_kernel=4"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            ExperimentConfig::parse("fl.schedules=Amb-9@50%"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(ExperimentConfig::parse("task.target_domain=none"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("train.optimizer=rmsprop"), Err(ConfigError::Value { .. })));
    }
}
