use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelError, NormKind};
use crate::numerics::Tensor;
use crate::rng;

/// Where a tensor lives: an encoder layer or one of the two pseudo-layers
/// around the encoder. Pseudo-layers never take part in ablation or churn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Input,
    Encoder(usize),
    Head,
}

impl Slot {
    pub fn encoder_index(self) -> Option<usize> {
        match self {
            Slot::Encoder(d) => Some(d),
            _ => None,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Input => f.write_str("input"),
            Slot::Encoder(d) => write!(f, "{d}"),
            Slot::Head => f.write_str("head"),
        }
    }
}

impl FromStr for Slot {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "input" => Ok(Slot::Input),
            "head" => Ok(Slot::Head),
            n => n
                .parse()
                .map(Slot::Encoder)
                .map_err(|_| format!("bad layer `{n}`")),
        }
    }
}

/// Module labels. Every encoder tensor maps to exactly one of the first ten;
/// the last two label the pseudo-layer tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Module {
    FfnStart,
    FfnEnd,
    MhsaQuery,
    MhsaKey,
    MhsaValue,
    MhsaPost,
    ConvPointwiseIn,
    ConvDepthwise,
    ConvPointwiseOut,
    NormParams,
    InputProjection,
    Head,
}

impl Module {
    /// The encoder taxonomy, in declaration order.
    pub const ENCODER: [Module; 10] = [
        Module::FfnStart,
        Module::FfnEnd,
        Module::MhsaQuery,
        Module::MhsaKey,
        Module::MhsaValue,
        Module::MhsaPost,
        Module::ConvPointwiseIn,
        Module::ConvDepthwise,
        Module::ConvPointwiseOut,
        Module::NormParams,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Module::FfnStart => "ffn_start",
            Module::FfnEnd => "ffn_end",
            Module::MhsaQuery => "mhsa_query",
            Module::MhsaKey => "mhsa_key",
            Module::MhsaValue => "mhsa_value",
            Module::MhsaPost => "mhsa_post",
            Module::ConvPointwiseIn => "conv_pointwise_in",
            Module::ConvDepthwise => "conv_depthwise",
            Module::ConvPointwiseOut => "conv_pointwise_out",
            Module::NormParams => "norm_params",
            Module::InputProjection => "input_projection",
            Module::Head => "head",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            Module::MhsaQuery | Module::MhsaKey | Module::MhsaValue | Module::MhsaPost
        )
    }

    pub fn is_convolution(self) -> bool {
        matches!(
            self,
            Module::ConvPointwiseIn | Module::ConvDepthwise | Module::ConvPointwiseOut
        )
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Module {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Module::ENCODER
            .iter()
            .chain(&[Module::InputProjection, Module::Head])
            .copied()
            .find(|m| m.label() == s)
            .ok_or_else(|| format!("unknown module `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub slot: Slot,
    pub module: Module,
    pub name: String,
}

impl ParamKey {
    pub fn new(slot: Slot, module: Module, name: &str) -> Self {
        Self {
            slot,
            module,
            name: name.to_string(),
        }
    }

    pub fn encoder(layer: usize, module: Module, name: &str) -> Self {
        Self::new(Slot::Encoder(layer), module, name)
    }

    /// `layer/module/tensor`
    pub fn path(&self) -> String {
        format!("{}/{}/{}", self.slot, self.module, self.name)
    }

    pub fn parse_path(path: &str) -> Result<Self, String> {
        let mut parts = path.splitn(3, '/');
        let (Some(slot), Some(module), Some(name)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("malformed tensor path `{path}`"));
        };
        Ok(Self {
            slot: slot.parse()?,
            module: module.parse()?,
            name: name.to_string(),
        })
    }

    /// Seed salt: hash of the tensor path.
    pub fn salt(&self) -> u64 {
        rng::fnv1a(self.path().as_bytes())
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// `U(-bound, bound)`
    Uniform { bound: f64 },
    Normal { std: f64 },
    Constant { value: f64 },
}

/// How a tensor's initial values are drawn: a distribution plus the seed
/// recipe `derive(root_seed, salt)` where `salt` hashes the tensor path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub kind: InitKind,
    pub root_seed: u64,
    pub salt: u64,
}

impl InitSpec {
    /// Draws a tensor with the recipe, substituting `root_seed`.
    pub fn sample_with_root(&self, shape: &[usize], root_seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self.kind {
            InitKind::Constant { value } => vec![value; n],
            InitKind::Uniform { bound } => {
                let mut r = rng::seeded(rng::derive(root_seed, self.salt));
                (0..n).map(|_| (2.0 * r.random::<f64>() - 1.0) * bound).collect()
            }
            InitKind::Normal { std } => {
                let mut r = rng::seeded(rng::derive(root_seed, self.salt));
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z * std
                    })
                    .collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("finite init")
    }

    pub fn sample(&self, shape: &[usize]) -> Tensor {
        self.sample_with_root(shape, self.root_seed)
    }
}

/// Trainable weights versus running statistics that only forward passes update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor,
    pub init: InitSpec,
    pub role: Role,
}

/// Shape and initialization of one tensor in the model layout.
#[derive(Clone, Debug)]
pub struct TensorLayout {
    pub key: ParamKey,
    pub shape: Vec<usize>,
    pub kind: InitKind,
    pub role: Role,
}

fn fan_in_uniform(fan_in: usize) -> InitKind {
    InitKind::Uniform {
        bound: 1.0 / (fan_in as f64).sqrt(),
    }
}

/// Every tensor of one encoder layer, in a fixed order.
pub fn layer_layout(config: &ModelConfig, layer: usize) -> Vec<TensorLayout> {
    let d = config.model_dim;
    let h = config.ffn_dim();
    let k = config.conv_kernel;
    let mut out = Vec::new();
    let mut push = |module: Module, name: &str, shape: Vec<usize>, kind: InitKind, role: Role| {
        out.push(TensorLayout {
            key: ParamKey::encoder(layer, module, name),
            shape,
            kind,
            role,
        });
    };
    let zeros = InitKind::Constant { value: 0.0 };
    let ones = InitKind::Constant { value: 1.0 };
    let w = Role::Weight;

    for ffn in [Module::FfnStart, Module::FfnEnd] {
        push(ffn, "w1", vec![d, h], fan_in_uniform(d), w);
        push(ffn, "b1", vec![h], zeros, w);
        push(ffn, "w2", vec![h, d], fan_in_uniform(h), w);
        push(ffn, "b2", vec![d], zeros, w);
    }
    for m in [Module::MhsaQuery, Module::MhsaKey, Module::MhsaValue, Module::MhsaPost] {
        push(m, "weight", vec![d, d], fan_in_uniform(d), w);
        push(m, "bias", vec![d], zeros, w);
    }
    push(Module::ConvPointwiseIn, "weight", vec![d, 2 * d], fan_in_uniform(d), w);
    push(Module::ConvPointwiseIn, "bias", vec![2 * d], zeros, w);
    push(Module::ConvDepthwise, "weight", vec![k, d], fan_in_uniform(k), w);
    push(Module::ConvDepthwise, "bias", vec![d], zeros, w);
    push(Module::ConvPointwiseOut, "weight", vec![d, d], fan_in_uniform(d), w);
    push(Module::ConvPointwiseOut, "bias", vec![d], zeros, w);

    for norm in NORM_SITES {
        push(Module::NormParams, &format!("{norm}_gamma"), vec![d], ones, w);
        push(Module::NormParams, &format!("{norm}_beta"), vec![d], zeros, w);
    }
    if config.norm_kind == NormKind::Batch {
        for norm in BATCH_NORM_SITES {
            push(Module::NormParams, &format!("{norm}_mean"), vec![d], zeros, Role::Buffer);
            push(Module::NormParams, &format!("{norm}_var"), vec![d], ones, Role::Buffer);
        }
    }
    out
}

/// Normalization sites inside a layer. The first four are pre-module layer
/// norms; `conv_norm` and `final` use the configured norm kind.
pub const NORM_SITES: [&str; 6] = ["ffn_start_ln", "mhsa_ln", "conv_ln", "conv_norm", "ffn_end_ln", "final"];
pub const BATCH_NORM_SITES: [&str; 2] = ["conv_norm", "final"];

/// Input projection, optional positional table and classifier head.
pub fn outer_layout(config: &ModelConfig) -> Vec<TensorLayout> {
    let d = config.model_dim;
    let zeros = InitKind::Constant { value: 0.0 };
    let mut out = vec![
        TensorLayout {
            key: ParamKey::new(Slot::Input, Module::InputProjection, "weight"),
            shape: vec![config.feature_dim, d],
            kind: fan_in_uniform(config.feature_dim),
            role: Role::Weight,
        },
        TensorLayout {
            key: ParamKey::new(Slot::Input, Module::InputProjection, "bias"),
            shape: vec![d],
            kind: zeros,
            role: Role::Weight,
        },
    ];
    if config.positional {
        out.push(TensorLayout {
            key: ParamKey::new(Slot::Input, Module::InputProjection, "positional"),
            shape: vec![config.max_frames, d],
            kind: InitKind::Normal { std: 0.1 },
            role: Role::Weight,
        });
    }
    out.push(TensorLayout {
        key: ParamKey::new(Slot::Head, Module::Head, "weight"),
        shape: vec![d, config.num_classes],
        kind: fan_in_uniform(d),
        role: Role::Weight,
    });
    out.push(TensorLayout {
        key: ParamKey::new(Slot::Head, Module::Head, "bias"),
        shape: vec![config.num_classes],
        kind: zeros,
        role: Role::Weight,
    });
    out
}

pub fn full_layout(config: &ModelConfig) -> Vec<TensorLayout> {
    let mut all = outer_layout(config);
    for d in 0..config.num_layers {
        all.extend(layer_layout(config, d));
    }
    all
}

/// The model θ: every tensor keyed by (layer, module, name), each with the
/// recipe that produced its initial values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    config: ModelConfig,
    root_seed: u64,
    entries: BTreeMap<ParamKey, Entry>,
}

/// Draws every tensor from its init recipe. Deterministic in `(config, root_seed)`.
pub fn init_model(config: &ModelConfig, root_seed: u64) -> Result<ParamStore, ModelError> {
    config.validate()?;
    let entries = full_layout(config)
        .into_iter()
        .map(|l| {
            let init = InitSpec {
                kind: l.kind,
                root_seed,
                salt: l.key.salt(),
            };
            let tensor = init.sample(&l.shape);
            (
                l.key,
                Entry {
                    tensor,
                    init,
                    role: l.role,
                },
            )
        })
        .collect();
    Ok(ParamStore {
        config: config.clone(),
        root_seed,
        entries,
    })
}

impl ParamStore {
    /// Assembles a store from explicit entries (checkpoint loading, submodels).
    pub fn from_entries(config: ModelConfig, root_seed: u64, entries: BTreeMap<ParamKey, Entry>) -> Self {
        Self {
            config,
            root_seed,
            entries,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn entries(&self) -> &BTreeMap<ParamKey, Entry> {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Entry)> {
        self.entries.iter()
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn tensor(&self, key: &ParamKey) -> Result<&Tensor, ModelError> {
        self.entries
            .get(key)
            .map(|e| &e.tensor)
            .ok_or_else(|| ModelError::UnknownKey(key.path()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces a tensor's values; the shape must be unchanged.
    pub fn set_tensor(&mut self, key: &ParamKey, tensor: Tensor) -> Result<(), ModelError> {
        let entry = self
            .entries
            .get_mut(key)
            .ok_or_else(|| ModelError::UnknownKey(key.path()))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(ModelError::ShapeMismatch {
                key: key.path(),
                expected: entry.tensor.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut BTreeMap<ParamKey, Entry> {
        &mut self.entries
    }

    /// Keys of every tensor in encoder layer `layer`.
    pub fn layer_keys(&self, layer: usize) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys().filter(move |k| k.slot == Slot::Encoder(layer))
    }

    /// Same config and the same key set with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<(), ModelError> {
        if self.config != other.config {
            return Err(ModelError::ConfigMismatch);
        }
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .iter()
                .zip(&other.entries)
                .any(|((ka, a), (kb, b))| ka != kb || a.tensor.shape() != b.tensor.shape())
        {
            return Err(ModelError::ConfigMismatch);
        }
        Ok(())
    }

    /// Copy with one tensor redrawn from its init distribution under
    /// `new_seed` as the root seed.
    pub fn reseed_tensor(&self, key: &ParamKey, new_seed: u64) -> Result<ParamStore, ModelError> {
        let entry = self
            .entries
            .get(key)
            .ok_or_else(|| ModelError::UnknownKey(key.path()))?;
        let fresh = entry.init.sample_with_root(entry.tensor.shape(), new_seed);
        let mut out = self.clone();
        out.entries.get_mut(key).expect("present").tensor = fresh;
        Ok(out)
    }

    /// Number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.role == Role::Weight)
            .map(|e| e.tensor.numel())
            .sum()
    }
}

/// Granularity for [`count_params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Total,
    PerLayer,
    PerModule,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamCounts {
    Total(usize),
    /// One count per encoder layer.
    PerLayer(Vec<usize>),
    /// `(layer, module) → count` over encoder tensors.
    PerModule(BTreeMap<(usize, Module), usize>),
}

/// Trainable parameter counts derived from the layout. Running statistics
/// are not parameters and are excluded.
pub fn count_params(config: &ModelConfig, granularity: Granularity) -> ParamCounts {
    let weights = |l: &TensorLayout| l.role == Role::Weight;
    let numel = |l: &TensorLayout| l.shape.iter().product::<usize>();
    match granularity {
        Granularity::Total => ParamCounts::Total(full_layout(config).iter().filter(|l| weights(l)).map(numel).sum()),
        Granularity::PerLayer => ParamCounts::PerLayer(
            (0..config.num_layers)
                .map(|d| layer_layout(config, d).iter().filter(|l| weights(l)).map(numel).sum())
                .collect(),
        ),
        Granularity::PerModule => {
            let mut map = BTreeMap::new();
            for d in 0..config.num_layers {
                for l in layer_layout(config, d).iter().filter(|l| weights(l)) {
                    *map.entry((d, l.key.module)).or_insert(0) += numel(l);
                }
            }
            ParamCounts::PerModule(map)
        }
    }
}

/// Trainable scalars in the encoder layers only.
pub fn encoder_param_count(config: &ModelConfig) -> usize {
    match count_params(config, Granularity::PerLayer) {
        ParamCounts::PerLayer(v) => v.iter().sum(),
        _ => unreachable!(),
    }
}

/// Trainable scalars outside the encoder (input projection, positions, head).
pub fn outer_param_count(config: &ModelConfig) -> usize {
    outer_layout(config)
        .iter()
        .filter(|l| l.role == Role::Weight)
        .map(|l| l.shape.iter().product::<usize>())
        .sum()
}
