use std::collections::BTreeMap;

use super::{Delta, DropoutSchedule, FlError};
use crate::ablation::LayerClassification;
use crate::model::{encoder_param_count, Entry, ModelConfig, Module, NormKind, ParamKey, ParamStore};
use crate::numerics::Tensor;
use crate::rng;

/// Droppable units per layer. A convolution unit is one channel under
/// batch norm, one channel group under group norm, and the whole module
/// under layer norm, so a dropped unit never changes the statistics the
/// remaining channels are normalized with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitCounts {
    pub ffn: usize,
    pub heads: usize,
    pub conv: usize,
    pub channels_per_conv_unit: usize,
}

pub fn unit_counts(config: &ModelConfig) -> UnitCounts {
    let d = config.model_dim;
    let (conv, width) = match config.norm_kind {
        NormKind::Batch => (d, 1),
        NormKind::Group => (config.group_count, config.channels_per_group()),
        NormKind::Layer => (1, d),
    };
    UnitCounts {
        ffn: config.ffn_dim(),
        heads: config.num_heads,
        conv,
        channels_per_conv_unit: width,
    }
}

/// Keep flags for one layer's droppable units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub ffn_start: Vec<bool>,
    pub ffn_end: Vec<bool>,
    pub heads: Vec<bool>,
    pub conv: Vec<bool>,
}

impl LayerMask {
    fn full(u: &UnitCounts) -> Self {
        Self {
            ffn_start: vec![true; u.ffn],
            ffn_end: vec![true; u.ffn],
            heads: vec![true; u.heads],
            conv: vec![true; u.conv],
        }
    }

    fn dims(&self) -> [&[bool]; 4] {
        [&self.ffn_start, &self.ffn_end, &self.heads, &self.conv]
    }

    /// Dropped unit counts as `[ffn_start, ffn_end, heads, conv]`.
    pub fn dropped(&self) -> [usize; 4] {
        self.dims().map(|v| v.iter().filter(|k| !**k).count())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubmodelMask {
    pub layers: Vec<LayerMask>,
    pub seed: u64,
}

impl SubmodelMask {
    pub fn all_keep(config: &ModelConfig) -> Self {
        let u = unit_counts(config);
        Self {
            layers: vec![LayerMask::full(&u); config.num_layers],
            seed: 0,
        }
    }

    pub fn is_all_keep(&self) -> bool {
        self.layers.iter().all(|l| l.dropped() == [0; 4])
    }

    fn check(&self, config: &ModelConfig) -> Result<(), FlError> {
        if self.layers.len() != config.num_layers {
            return Err(FlError::MaskMismatch(format!(
                "{} layer masks for {} layers",
                self.layers.len(),
                config.num_layers
            )));
        }
        let u = unit_counts(config);
        let want = [u.ffn, u.ffn, u.heads, u.conv];
        for (d, l) in self.layers.iter().enumerate() {
            let got = l.dims().map(|v| v.len());
            if got != want {
                return Err(FlError::MaskMismatch(format!("layer {d} has unit counts {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }
}

const DIM_LABELS: [&str; 4] = ["ffn_start", "ffn_end", "heads", "conv"];

/// Drops `floor(rate · units)` units per droppable dimension of every
/// layer, chosen uniformly at random from `seed`.
pub fn build_mask(
    schedule: &DropoutSchedule,
    classification: &LayerClassification,
    config: &ModelConfig,
    seed: u64,
) -> Result<SubmodelMask, FlError> {
    let rates = schedule.layer_rates(classification, config.num_layers)?;
    let u = unit_counts(config);
    let sizes = [u.ffn, u.ffn, u.heads, u.conv];
    let mut layers = Vec::with_capacity(config.num_layers);
    for (d, &rate) in rates.iter().enumerate() {
        let mut keep: [Vec<bool>; 4] = sizes.map(|n| vec![true; n]);
        if rate > 0.0 {
            for (i, &units) in sizes.iter().enumerate() {
                let k = (rate * units as f64).floor() as usize;
                let mut r = rng::seeded(rng::derive_index(rng::derive_str(seed, DIM_LABELS[i]), "layer", d as u64));
                for idx in rand::seq::index::sample(&mut r, units, k) {
                    keep[i][idx] = false;
                }
            }
        }
        let [ffn_start, ffn_end, heads, conv] = keep;
        layers.push(LayerMask {
            ffn_start,
            ffn_end,
            heads,
            conv,
        });
    }
    Ok(SubmodelMask { layers, seed })
}

fn kept(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect()
}

/// Unit indices to the contiguous index ranges they own.
fn expand(units: &[usize], width: usize) -> Vec<usize> {
    units.iter().flat_map(|&u| u * width..(u + 1) * width).collect()
}

/// Kept rows and columns of one tensor; `None` keeps the whole axis.
/// Vectors are treated as a single row.
struct Slice {
    rows: Option<Vec<usize>>,
    cols: Option<Vec<usize>>,
}

fn slice_for(key: &ParamKey, mask: &SubmodelMask, config: &ModelConfig) -> Slice {
    let whole = Slice { rows: None, cols: None };
    let Some(d) = key.slot.encoder_index() else {
        return whole;
    };
    let lm = &mask.layers[d];
    let u = unit_counts(config);
    let c = config.model_dim;
    let cols = |v: Vec<usize>| Slice {
        rows: None,
        cols: Some(v),
    };
    let rows = |v: Vec<usize>| Slice {
        rows: Some(v),
        cols: None,
    };
    let heads = || expand(&kept(&lm.heads), config.head_dim());
    let channels = || expand(&kept(&lm.conv), u.channels_per_conv_unit);
    let name = key.name.as_str();
    match key.module {
        Module::FfnStart | Module::FfnEnd => {
            let flags = if key.module == Module::FfnStart {
                &lm.ffn_start
            } else {
                &lm.ffn_end
            };
            match name {
                "w1" | "b1" => cols(kept(flags)),
                "w2" => rows(kept(flags)),
                _ => whole,
            }
        }
        Module::MhsaQuery | Module::MhsaKey | Module::MhsaValue => cols(heads()),
        Module::MhsaPost if name == "weight" => rows(heads()),
        Module::ConvPointwiseIn => {
            let ch = channels();
            let mut both = ch.clone();
            both.extend(ch.iter().map(|i| i + c));
            cols(both)
        }
        Module::ConvDepthwise => cols(channels()),
        Module::ConvPointwiseOut if name == "weight" => rows(channels()),
        Module::NormParams if name.starts_with("conv_norm_") => cols(channels()),
        _ => whole,
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("model tensors are vectors or matrices"),
    }
}

fn gather(t: &Tensor, s: &Slice) -> Tensor {
    let (r, c) = as_matrix(t.shape());
    let rows: Vec<usize> = s.rows.clone().unwrap_or_else(|| (0..r).collect());
    let cols: Vec<usize> = s.cols.clone().unwrap_or_else(|| (0..c).collect());
    let src = t.data();
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &i in &rows {
        for &j in &cols {
            data.push(src[i * c + j]);
        }
    }
    let shape = if t.rank() == 1 {
        vec![cols.len()]
    } else {
        vec![rows.len(), cols.len()]
    };
    Tensor::from_parts(shape, data)
}

/// Writes `sub` into a copy of `base` at the sliced positions.
fn scatter_into(base: &Tensor, sub: &Tensor, s: &Slice) -> Tensor {
    let (r, c) = as_matrix(base.shape());
    let rows: Vec<usize> = s.rows.clone().unwrap_or_else(|| (0..r).collect());
    let cols: Vec<usize> = s.cols.clone().unwrap_or_else(|| (0..c).collect());
    let mut data = base.data().to_vec();
    let src = sub.data();
    for (si, &i) in rows.iter().enumerate() {
        for (sj, &j) in cols.iter().enumerate() {
            data[i * c + j] = src[si * cols.len() + sj];
        }
    }
    Tensor::from_parts(base.shape().to_vec(), data)
}

/// Dense submodel holding only the kept units. Forward passes read widths
/// from tensor shapes, so the result runs and trains like a full model.
pub fn extract_submodel(params: &ParamStore, mask: &SubmodelMask) -> Result<ParamStore, FlError> {
    let config = params.config();
    mask.check(config)?;
    let entries: BTreeMap<ParamKey, Entry> = params
        .iter()
        .map(|(key, e)| {
            let s = slice_for(key, mask, config);
            (
                key.clone(),
                Entry {
                    tensor: gather(&e.tensor, &s),
                    init: e.init,
                    role: e.role,
                },
            )
        })
        .collect();
    Ok(ParamStore::from_entries(config.clone(), params.root_seed(), entries))
}

/// Scatters submodel-shaped tensors back to full shapes, with zeros at the
/// dropped positions.
pub fn embed_update(full: &ParamStore, mask: &SubmodelMask, sub_delta: &Delta) -> Result<Delta, FlError> {
    let config = full.config();
    mask.check(config)?;
    let mut out = Delta::new();
    for (key, e) in full.iter() {
        let sub = sub_delta
            .get(key)
            .ok_or_else(|| FlError::MaskMismatch(format!("update lacks {key}")))?;
        let s = slice_for(key, mask, config);
        let zeros = Tensor::zeros(e.tensor.shape());
        let expected = gather(&zeros, &s);
        if sub.shape() != expected.shape() {
            return Err(FlError::MaskMismatch(format!(
                "{key}: update shape {:?}, submodel shape {:?}",
                sub.shape(),
                expected.shape()
            )));
        }
        out.insert(key.clone(), scatter_into(&zeros, sub, &s));
    }
    Ok(out)
}

/// Which coordinates of each full tensor the submodel keeps.
pub fn coverage(full: &ParamStore, mask: &SubmodelMask) -> Result<BTreeMap<ParamKey, Vec<bool>>, FlError> {
    let config = full.config();
    mask.check(config)?;
    Ok(full
        .iter()
        .map(|(key, e)| {
            let s = slice_for(key, mask, config);
            let ones = Tensor::full(e.tensor.shape(), 1.0);
            let marked = scatter_into(&Tensor::zeros(e.tensor.shape()), &gather(&ones, &s), &s);
            (key.clone(), marked.data().iter().map(|&v| v == 1.0).collect())
        })
        .collect())
}

/// The full model with every dropped coordinate set to zero.
pub fn zero_dropped(params: &ParamStore, mask: &SubmodelMask) -> Result<ParamStore, FlError> {
    let cov = coverage(params, mask)?;
    let mut out = params.clone();
    for (key, e) in params.iter() {
        let data = e
            .tensor
            .data()
            .iter()
            .zip(&cov[key])
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        out.set_tensor(key, Tensor::from_parts(e.tensor.shape().to_vec(), data))?;
    }
    Ok(out)
}

/// Trainable scalars absent from the submodel, counted from unit sizes:
/// an FFN unit owns a `w1` column, a `b1` entry and a `w2` row; a head owns
/// its query/key/value columns and biases plus its output-projection rows;
/// a convolution channel owns two input-projection columns and biases, a
/// depthwise column and bias, a norm gain and shift, and an
/// output-projection row.
pub fn dropped_param_count(mask: &SubmodelMask, config: &ModelConfig) -> Result<usize, FlError> {
    mask.check(config)?;
    let d = config.model_dim;
    let hd = config.head_dim();
    let u = unit_counts(config);
    let per_ffn = 2 * d + 1;
    let per_head = 4 * d * hd + 3 * hd;
    let per_conv = u.channels_per_conv_unit * (3 * d + config.conv_kernel + 5);
    Ok(mask
        .layers
        .iter()
        .map(|l| {
            let [fs, fe, h, c] = l.dropped();
            (fs + fe) * per_ffn + h * per_head + c * per_conv
        })
        .sum())
}

/// Dropped trainable scalars over the encoder's trainable scalars.
pub fn params_dropped_fraction(mask: &SubmodelMask, config: &ModelConfig) -> Result<f64, FlError> {
    Ok(dropped_param_count(mask, config)? as f64 / encoder_param_count(config) as f64)
}
