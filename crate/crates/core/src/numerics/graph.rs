//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameters
//! are registered with [`Graph::param`] and receive dense ids in
//! registration order; [`Graph::backward`] walks the tape in exact reverse
//! order and returns one gradient per parameter id.

use super::ops::{self, NormMode, RunningStats};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddPositional { x: Var, table: Var, seq_len: usize },
    Swish(Var),
    Glu(Var),
    Softmax { x: Var, axis: usize },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, kind: NormBackward },
    DepthwiseConv { x: Var, kernel: Var, seq_len: usize },
    Attention { q: Var, k: Var, v: Var, seq_len: usize, head_dim: usize, probs: Vec<f64> },
    MeanPool { x: Var, seq_len: usize },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Sum(Var),
}

/// Which statistics a normalization node reduced over.
#[derive(Clone, Copy)]
enum NormBackward {
    /// Per row, contiguous channel groups of this size.
    Groups(usize),
    /// Per column across all rows.
    Batch,
    /// Constant statistics (eval-mode batch norm).
    Frozen,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    num_params: usize,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf; its gradient is returned by `backward`
    /// at index `param_id(var)`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let id = self.num_params;
        self.num_params += 1;
        self.push(value, Op::Param(id), &[])
    }

    pub fn param_id(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Registers a constant leaf that receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out.check_finite("add")?, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out.check_finite("mul")?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor).check_finite("scale")?;
        Ok(self.push(out, Op::Scale(x, factor), &[x]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x·w + b` for a `rows×in` input.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    pub fn add_positional(&mut self, x: Var, table: Var, seq_len: usize) -> Result<Var> {
        let out = ops::add_positional(self.value(x), self.value(table), seq_len)?;
        Ok(self.push(out, Op::AddPositional { x, table, seq_len }, &[x, table]))
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let out = ops::swish(self.value(x)).check_finite("swish")?;
        Ok(self.push(out, Op::Swish(x), &[x]))
    }

    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let out = ops::glu(self.value(x))?;
        Ok(self.push(out, Op::Glu(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    fn push_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormBackward,
        op: &'static str,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = self.value(x).cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: shape,
                rhs: g.shape().to_vec(),
            });
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, gv), bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        let out = Tensor::from_parts(shape, out).check_finite(op)?;
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let stats = ops::group_stats(self.value(x), groups, eps)?;
        let size = self.value(x).cols() / groups;
        self.push_norm(x, gamma, beta, stats.xhat, stats.inv_std, NormBackward::Groups(size), "group_norm")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.group_norm(x, 1, gamma, beta, eps)
    }

    /// Batch normalization; also returns the running stats after this call
    /// (blended in train mode, unchanged in eval mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: NormMode,
        eps: f64,
    ) -> Result<(Var, RunningStats)> {
        match mode {
            NormMode::Train => {
                let stats = ops::batch_stats(self.value(x), eps)?;
                let next = ops::update_running(running, &stats.mean, &stats.var);
                let v = self.push_norm(x, gamma, beta, stats.xhat, stats.inv_std, NormBackward::Batch, "batch_norm")?;
                Ok((v, next))
            }
            NormMode::Eval => {
                let stats = ops::eval_stats(self.value(x), running, eps)?;
                let v = self.push_norm(x, gamma, beta, stats.xhat, stats.inv_std, NormBackward::Frozen, "batch_norm")?;
                Ok((v, running.clone()))
            }
        }
    }

    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, seq_len: usize) -> Result<Var> {
        let out = ops::conv1d_depthwise_batched(self.value(x), self.value(kernel), seq_len)?;
        Ok(self.push(out, Op::DepthwiseConv { x, kernel, seq_len }, &[x, kernel]))
    }

    /// Multi-head scaled dot-product attention within each sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, head_dim: usize) -> Result<Var> {
        let (out, probs) = ops::attention_forward(self.value(q), self.value(k), self.value(v), seq_len, head_dim)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                head_dim,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn mean_pool(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let out = ops::mean_pool(self.value(x), seq_len)?;
        Ok(self.push(out, Op::MeanPool { x, seq_len }, &[x]))
    }

    /// Mean cross-entropy over the batch; a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_with_probs(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let out = Tensor::scalar(s).check_finite("sum")?;
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    /// Reverse pass from a scalar node. Returns one gradient per registered
    /// parameter (zeros for parameters the loss does not depend on). A graph
    /// can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor>> {
        if self.consumed {
            return Err(NumericsError::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params: Vec<Option<Tensor>> = (0..self.num_params).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[idx].op {
                params[id] = Some(grad);
                continue;
            }
            for (parent, g) in self.local_grads(idx, &grad)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(params
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.unwrap_or_else(|| Tensor::zeros(self.param_shape(id))))
            .collect())
    }

    fn param_shape(&self, id: usize) -> &[usize] {
        self.nodes
            .iter()
            .find(|n| matches!(n.op, Op::Param(p) if p == id))
            .map(|n| n.value.shape())
            .expect("registered parameter")
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `idx` to its parents.
    fn local_grads(&self, idx: usize, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let g = grad.data();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let da = ops::gemm_nt(g, bv.data(), m, n, k);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.wants(*b) {
                    let db = ops::gemm_tn(av.data(), g, k, m, n);
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, grad.clone()));
                out.push((*b, grad.clone()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                out.push((*a, grad.zip(bv, "mul", |d, y| d * y)?));
                out.push((*b, grad.zip(av, "mul", |d, x| d * x)?));
            }
            Op::Scale(x, f) => out.push((*x, grad.map(|d| d * f))),
            Op::AddBias(x, bias) => {
                out.push((*x, grad.clone()));
                if self.wants(*bias) {
                    let c = grad.cols();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (s, v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    out.push((*bias, Tensor::from_parts(self.value(*bias).shape().to_vec(), db)));
                }
            }
            Op::AddPositional { x, table, seq_len } => {
                out.push((*x, grad.clone()));
                if self.wants(*table) {
                    let width = seq_len * grad.cols();
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for seq in g.chunks(width) {
                        for (s, v) in dt.iter_mut().zip(seq) {
                            *s += v;
                        }
                    }
                    out.push((*table, Tensor::from_parts(self.value(*table).shape().to_vec(), dt)));
                }
            }
            Op::Swish(x) => {
                let xv = self.value(*x);
                let sig = ops::sigmoid_slice(xv.data());
                let dx = g
                    .iter()
                    .zip(xv.data())
                    .zip(&sig)
                    .map(|((d, x), s)| d * (s + x * s * (1.0 - s)))
                    .collect();
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            Op::Glu(x) => {
                let xv = self.value(*x);
                let c2 = xv.cols();
                let c = c2 / 2;
                let mut dx = vec![0.0; xv.numel()];
                for ((row, drow), gout) in xv.data().chunks(c2).zip(dx.chunks_mut(c2)).zip(g.chunks(c)) {
                    for j in 0..c {
                        let a = row[j];
                        let s = ops::sigmoid_slice(&row[c + j..c + j + 1])[0];
                        drow[j] = gout[j] * s;
                        drow[c + j] = gout[j] * a * s * (1.0 - s);
                    }
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let len = y.shape()[*axis];
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let outer: usize = y.shape()[..*axis].iter().product();
                let yd = y.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(y.shape().to_vec(), dx)));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => {
                let c = node.value.cols();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j];
                            db[j] += grow[j];
                        }
                    }
                    out.push((*gamma, Tensor::from_parts(self.value(*gamma).shape().to_vec(), dg)));
                    out.push((*beta, Tensor::from_parts(self.value(*beta).shape().to_vec(), db)));
                }
                if self.wants(*x) {
                    // dxhat = dy * gamma
                    let mut dxhat = g.to_vec();
                    for row in dxhat.chunks_mut(c) {
                        for (v, gm) in row.iter_mut().zip(gam) {
                            *v *= gm;
                        }
                    }
                    let dx = match kind {
                        NormBackward::Groups(size) => {
                            let n = *size as f64;
                            let mut dx = vec![0.0; dxhat.len()];
                            for (((dxh, xh), d), is) in dxhat
                                .chunks(*size)
                                .zip(xhat.chunks(*size))
                                .zip(dx.chunks_mut(*size))
                                .zip(inv_std)
                            {
                                let s1: f64 = dxh.iter().sum();
                                let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                                for j in 0..*size {
                                    d[j] = is / n * (n * dxh[j] - s1 - xh[j] * s2);
                                }
                            }
                            dx
                        }
                        NormBackward::Batch => {
                            let rows = dxhat.len() / c;
                            let n = rows as f64;
                            let mut s1 = vec![0.0; c];
                            let mut s2 = vec![0.0; c];
                            for (dxh, xh) in dxhat.chunks(c).zip(xhat.chunks(c)) {
                                for j in 0..c {
                                    s1[j] += dxh[j];
                                    s2[j] += dxh[j] * xh[j];
                                }
                            }
                            let mut dx = vec![0.0; dxhat.len()];
                            for ((d, dxh), xh) in dx.chunks_mut(c).zip(dxhat.chunks(c)).zip(xhat.chunks(c)) {
                                for j in 0..c {
                                    d[j] = inv_std[j] / n * (n * dxh[j] - s1[j] - xh[j] * s2[j]);
                                }
                            }
                            dx
                        }
                        NormBackward::Frozen => {
                            for row in dxhat.chunks_mut(c) {
                                for (v, is) in row.iter_mut().zip(inv_std) {
                                    *v *= is;
                                }
                            }
                            dxhat
                        }
                    };
                    out.push((*x, Tensor::from_parts(node.value.shape().to_vec(), dx)));
                }
            }
            Op::DepthwiseConv { x, kernel, seq_len } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (k, c) = (kv.shape()[0], kv.shape()[1]);
                let half = k / 2;
                let (xd, wd) = (xv.data(), kv.data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for s in 0..xv.rows() / seq_len {
                    let base = s * seq_len;
                    for t in 0..*seq_len {
                        let grow = &g[(base + t) * c..(base + t + 1) * c];
                        for tap in 0..k {
                            let src = t as isize + tap as isize - half as isize;
                            if src < 0 || src >= *seq_len as isize {
                                continue;
                            }
                            let r = base + src as usize;
                            for j in 0..c {
                                dx[r * c + j] += grow[j] * wd[tap * c + j];
                                dw[tap * c + j] += grow[j] * xd[r * c + j];
                            }
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
                out.push((*kernel, Tensor::from_parts(kv.shape().to_vec(), dw)));
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                head_dim,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qv.cols();
                let (t, hd) = (*seq_len, *head_dim);
                let heads = width / hd;
                let batch = qv.rows() / t;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; t * t];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        let off = |row: usize| (b * t + row) * width + h * hd;
                        // dP = dO·Vᵀ ; dV = Pᵀ·dO
                        for i in 0..t {
                            let go = &g[off(i)..off(i) + hd];
                            for j in 0..t {
                                let vrow = &vd[off(j)..off(j) + hd];
                                dp[i * t + j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                let pij = p[i * t + j];
                                for (dvj, gv) in dv[off(j)..off(j) + hd].iter_mut().zip(go) {
                                    *dvj += pij * gv;
                                }
                            }
                        }
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then scaled
                        for i in 0..t {
                            let row = &mut dp[i * t..(i + 1) * t];
                            let prow = &p[i * t..(i + 1) * t];
                            let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (d, pv) in row.iter_mut().zip(prow) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        for i in 0..t {
                            for j in 0..t {
                                let ds = dp[i * t + j];
                                if ds == 0.0 {
                                    continue;
                                }
                                for e in 0..hd {
                                    dq[off(i) + e] += ds * kd[off(j) + e];
                                    dk[off(j) + e] += ds * qd[off(i) + e];
                                }
                            }
                        }
                    }
                }
                let shape = qv.shape().to_vec();
                out.push((*q, Tensor::from_parts(shape.clone(), dq)));
                out.push((*k, Tensor::from_parts(shape.clone(), dk)));
                out.push((*v, Tensor::from_parts(shape, dv)));
            }
            Op::MeanPool { x, seq_len } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (s, seq) in dx.chunks_mut(seq_len * c).enumerate() {
                    let grow = &g[s * c..(s + 1) * c];
                    for row in seq.chunks_mut(c) {
                        for (d, gv) in row.iter_mut().zip(grow) {
                            *d = gv / *seq_len as f64;
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let scale = g[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (row, &label) in dl.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, Tensor::from_parts(lv.shape().to_vec(), dl)));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                out.push((*x, Tensor::full(xv.shape(), g[0])));
            }
        }
        Ok(out)
    }
}
