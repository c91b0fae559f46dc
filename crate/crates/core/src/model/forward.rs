use std::collections::BTreeMap;

use super::params::{ParamKey, ParamStore, Role, Slot};
use super::{LayerOrder, Module, ModelError, NormKind};
use crate::numerics::{Graph, NormMode, RunningStats, Tensor, Var};

/// A traced forward pass: the graph, the logits node and the parameter key
/// behind each graph parameter id.
pub struct Trace {
    pub graph: Graph,
    pub logits: Var,
    pub params: Vec<ParamKey>,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: Option<Trace>,
    /// Batch-norm running statistics after this pass, keyed by buffer.
    /// Empty unless the model uses batch norm in train mode.
    pub running_stats: Vec<(ParamKey, Tensor)>,
}

struct Builder<'a> {
    store: &'a ParamStore,
    graph: Graph,
    vars: BTreeMap<ParamKey, Var>,
    keys: Vec<ParamKey>,
    mode: NormMode,
    seq_len: usize,
    running: Vec<(ParamKey, Tensor)>,
}

impl<'a> Builder<'a> {
    fn param(&mut self, key: ParamKey) -> Result<Var, ModelError> {
        if let Some(v) = self.vars.get(&key) {
            return Ok(*v);
        }
        let entry = self
            .store
            .get(&key)
            .ok_or_else(|| ModelError::UnknownKey(key.path()))?;
        debug_assert_eq!(entry.role, Role::Weight);
        let v = self.graph.param(entry.tensor.clone());
        self.vars.insert(key.clone(), v);
        self.keys.push(key);
        Ok(v)
    }

    fn enc(&mut self, layer: usize, module: Module, name: &str) -> Result<Var, ModelError> {
        self.param(ParamKey::encoder(layer, module, name))
    }

    fn linear(&mut self, x: Var, layer: usize, module: Module, w: &str, b: &str) -> Result<Var, ModelError> {
        let (wv, bv) = (self.enc(layer, module, w)?, self.enc(layer, module, b)?);
        Ok(self.graph.linear(x, wv, bv)?)
    }

    fn layer_norm(&mut self, layer: usize, site: &str, x: Var) -> Result<Var, ModelError> {
        let g = self.enc(layer, Module::NormParams, &format!("{site}_gamma"))?;
        let b = self.enc(layer, Module::NormParams, &format!("{site}_beta"))?;
        Ok(self.graph.layer_norm(x, g, b, self.store.config().norm_eps)?)
    }

    /// Normalization using the configured kind.
    fn configured_norm(&mut self, layer: usize, site: &str, x: Var) -> Result<Var, ModelError> {
        let config = self.store.config();
        let eps = config.norm_eps;
        let g = self.enc(layer, Module::NormParams, &format!("{site}_gamma"))?;
        let b = self.enc(layer, Module::NormParams, &format!("{site}_beta"))?;
        match config.norm_kind {
            NormKind::Layer => Ok(self.graph.layer_norm(x, g, b, eps)?),
            NormKind::Group => {
                let channels = self.graph.value(x).cols();
                let groups = channels / config.channels_per_group();
                Ok(self.graph.group_norm(x, groups, g, b, eps)?)
            }
            NormKind::Batch => {
                let mean_key = ParamKey::encoder(layer, Module::NormParams, &format!("{site}_mean"));
                let var_key = ParamKey::encoder(layer, Module::NormParams, &format!("{site}_var"));
                let stats = RunningStats {
                    mean: self.store.tensor(&mean_key)?.data().to_vec(),
                    var: self.store.tensor(&var_key)?.data().to_vec(),
                    momentum: config.bn_momentum,
                };
                let (y, next) = self.graph.batch_norm(x, g, b, &stats, self.mode, eps)?;
                if self.mode == NormMode::Train {
                    self.running.push((mean_key, Tensor::vector(next.mean)));
                    self.running.push((var_key, Tensor::vector(next.var)));
                }
                Ok(y)
            }
        }
    }

    /// `x + 0.5 · FFN(LN(x))`
    fn ffn(&mut self, layer: usize, module: Module, site: &str, x: Var) -> Result<Var, ModelError> {
        let h = self.layer_norm(layer, site, x)?;
        let h = self.linear(h, layer, module, "w1", "b1")?;
        let h = self.graph.swish(h)?;
        let h = self.linear(h, layer, module, "w2", "b2")?;
        let h = self.graph.scale(h, 0.5)?;
        Ok(self.graph.add(x, h)?)
    }

    fn mhsa(&mut self, layer: usize, x: Var) -> Result<Var, ModelError> {
        let h = self.layer_norm(layer, "mhsa_ln", x)?;
        let q = self.linear(h, layer, Module::MhsaQuery, "weight", "bias")?;
        let k = self.linear(h, layer, Module::MhsaKey, "weight", "bias")?;
        let v = self.linear(h, layer, Module::MhsaValue, "weight", "bias")?;
        let a = self.graph.attention(q, k, v, self.seq_len, self.store.config().head_dim())?;
        let o = self.linear(a, layer, Module::MhsaPost, "weight", "bias")?;
        Ok(self.graph.add(x, o)?)
    }

    fn conv(&mut self, layer: usize, x: Var) -> Result<Var, ModelError> {
        let h = self.layer_norm(layer, "conv_ln", x)?;
        let h = self.linear(h, layer, Module::ConvPointwiseIn, "weight", "bias")?;
        let h = self.graph.glu(h)?;
        let kernel = self.enc(layer, Module::ConvDepthwise, "weight")?;
        let h = self.graph.conv1d_depthwise(h, kernel, self.seq_len)?;
        let bias = self.enc(layer, Module::ConvDepthwise, "bias")?;
        let h = self.graph.add_bias(h, bias)?;
        let h = self.configured_norm(layer, "conv_norm", h)?;
        let h = self.graph.swish(h)?;
        let o = self.linear(h, layer, Module::ConvPointwiseOut, "weight", "bias")?;
        Ok(self.graph.add(x, o)?)
    }

    fn layer(&mut self, layer: usize, x: Var) -> Result<Var, ModelError> {
        let mut h = self.ffn(layer, Module::FfnStart, "ffn_start_ln", x)?;
        match self.store.config().layer_order {
            LayerOrder::NonStreaming => {
                h = self.mhsa(layer, h)?;
                h = self.conv(layer, h)?;
            }
            LayerOrder::Streaming => {
                h = self.conv(layer, h)?;
                h = self.mhsa(layer, h)?;
            }
        }
        h = self.ffn(layer, Module::FfnEnd, "ffn_end_ln", h)?;
        self.configured_norm(layer, "final", h)
    }
}

/// Runs the encoder and head on a `B×T×F` batch and returns `B×num_classes`
/// logits. Layer widths are read from the stored tensors, so submodels with
/// fewer hidden units, heads or conv channels run through the same code.
pub fn forward(params: &ParamStore, batch: &Tensor, mode: NormMode, trace: bool) -> Result<ForwardOutput, ModelError> {
    let config = params.config();
    if batch.rank() != 3 || batch.shape()[2] != config.feature_dim {
        return Err(ModelError::Input(format!(
            "expected B×T×{} features, got shape {:?}",
            config.feature_dim,
            batch.shape()
        )));
    }
    let (b, t, f) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    if b == 0 || t == 0 {
        return Err(ModelError::Input("empty batch".into()));
    }
    if config.positional && t > config.max_frames {
        return Err(ModelError::Input(format!(
            "{t} frames exceed the positional table ({} rows)",
            config.max_frames
        )));
    }

    let mut bld = Builder {
        store: params,
        graph: Graph::new(),
        vars: BTreeMap::new(),
        keys: Vec::new(),
        mode,
        seq_len: t,
        running: Vec::new(),
    };
    let x = bld.graph.input(batch.reshape(vec![b * t, f])?);
    let w = bld.param(ParamKey::new(Slot::Input, Module::InputProjection, "weight"))?;
    let bias = bld.param(ParamKey::new(Slot::Input, Module::InputProjection, "bias"))?;
    let mut h = bld.graph.linear(x, w, bias)?;
    if config.positional {
        let table = bld.param(ParamKey::new(Slot::Input, Module::InputProjection, "positional"))?;
        h = bld.graph.add_positional(h, table, t)?;
    }
    for d in 0..config.num_layers {
        h = bld.layer(d, h)?;
    }
    let pooled = bld.graph.mean_pool(h, t)?;
    let hw = bld.param(ParamKey::new(Slot::Head, Module::Head, "weight"))?;
    let hb = bld.param(ParamKey::new(Slot::Head, Module::Head, "bias"))?;
    let logits = bld.graph.linear(pooled, hw, hb)?;

    let value = bld.graph.value(logits).clone();
    let running = std::mem::take(&mut bld.running);
    Ok(ForwardOutput {
        logits: value,
        trace: trace.then(|| Trace {
            graph: bld.graph,
            logits,
            params: bld.keys,
        }),
        running_stats: running,
    })
}

pub struct LossAndGrads {
    pub loss: f64,
    pub logits: Tensor,
    /// Gradient for every trainable tensor of the store.
    pub grads: BTreeMap<ParamKey, Tensor>,
    pub running_stats: Vec<(ParamKey, Tensor)>,
}

/// Mean cross-entropy of the batch and its gradient with respect to every
/// trainable tensor (zeros for tensors the loss does not touch).
pub fn loss_and_grads(
    params: &ParamStore,
    batch: &Tensor,
    labels: &[usize],
    mode: NormMode,
) -> Result<LossAndGrads, ModelError> {
    let out = forward(params, batch, mode, true)?;
    let mut trace = out.trace.expect("traced");
    let loss_var = trace.graph.cross_entropy(trace.logits, labels)?;
    let loss = trace.graph.value(loss_var).item();
    let grad_list = trace.graph.backward(loss_var)?;
    let mut grads: BTreeMap<ParamKey, Tensor> = trace.params.into_iter().zip(grad_list).collect();
    for (key, entry) in params.iter() {
        if entry.role == Role::Weight && !grads.contains_key(key) {
            grads.insert(key.clone(), Tensor::zeros(entry.tensor.shape()));
        }
    }
    Ok(LossAndGrads {
        loss,
        logits: out.logits,
        grads,
        running_stats: out.running_stats,
    })
}
