//! Forward kernels. Every function here is pure; the tracing wrappers in
//! [`super::graph`] call into these and record what backward needs.

use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

fn require_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(NumericsError::Rank {
            op,
            expected: rank,
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v)).collect()
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[m×n] = aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
    c
}

/// `c[m×n] = a · bᵀ` with `a` stored `m×k` and `b` stored `n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_parts(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n)).check_finite("matmul")
}

/// Adds a length-`C` bias to every row of a `rows×C` tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if bias.numel() != c {
        return Err(NumericsError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    out.check_finite("add_bias")
}

/// Adds the first `T` rows of a position table to every length-`T` sequence
/// of a stacked `(B·T)×C` tensor.
pub fn add_positional(x: &Tensor, table: &Tensor, seq_len: usize) -> Result<Tensor> {
    let c = x.cols();
    if table.cols() != c || table.rows() < seq_len || seq_len == 0 || x.rows() % seq_len != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "add_positional",
            lhs: x.shape().to_vec(),
            rhs: table.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for seq in out.data_mut().chunks_mut(seq_len * c) {
        for (v, p) in seq.iter_mut().zip(table.data()) {
            *v += p;
        }
    }
    out.check_finite("add_positional")
}

/// Depthwise 1-D convolution along rows with zero same-padding; `x` is `T×C`,
/// `kernel` is `K×C` with `K` odd.
pub fn conv1d_depthwise(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    conv1d_depthwise_batched(x, kernel, x.rows())
}

/// [`conv1d_depthwise`] applied independently to each length-`seq_len`
/// sequence of a stacked `(B·T)×C` tensor.
pub fn conv1d_depthwise_batched(x: &Tensor, kernel: &Tensor, seq_len: usize) -> Result<Tensor> {
    require_rank(kernel, 2, "conv1d_depthwise")?;
    let (k, c) = (kernel.shape()[0], kernel.shape()[1]);
    if k % 2 == 0 {
        return Err(NumericsError::EvenKernel(k));
    }
    if x.cols() != c || seq_len == 0 || x.rows() % seq_len != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d_depthwise",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let half = k / 2;
    let xd = x.data();
    let w = kernel.data();
    let mut out = vec![0.0; xd.len()];
    for s in 0..x.rows() / seq_len {
        let base = s * seq_len;
        for t in 0..seq_len {
            let orow = &mut out[(base + t) * c..(base + t + 1) * c];
            for tap in 0..k {
                let src = t as isize + tap as isize - half as isize;
                if src < 0 || src >= seq_len as isize {
                    continue;
                }
                let xrow = &xd[(base + src as usize) * c..(base + src as usize + 1) * c];
                let wrow = &w[tap * c..(tap + 1) * c];
                for ((o, xv), wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out).check_finite("conv1d_depthwise")
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(NumericsError::Axis {
            axis,
            shape: x.shape().to_vec(),
        });
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (xd[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out).check_finite("softmax")
}

/// Row-wise softmax over a contiguous slice of width `n`.
pub(crate) fn softmax_rows_in_place(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Normalized values and per-(row, group) inverse standard deviations.
pub(crate) struct GroupStats {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn group_stats(x: &Tensor, groups: usize, eps: f64) -> Result<GroupStats> {
    let c = x.cols();
    if groups == 0 || c % groups != 0 {
        return Err(NumericsError::GroupDivisibility {
            channels: c,
            groups,
        });
    }
    let size = c / groups;
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = Vec::with_capacity(x.rows() * groups);
    for (chunk_in, chunk_out) in xd.chunks(size).zip(xhat.chunks_mut(size)) {
        let mean = chunk_in.iter().sum::<f64>() / size as f64;
        let var = chunk_in.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in chunk_out.iter_mut().zip(chunk_in) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    Ok(GroupStats { xhat, inv_std })
}

fn affine(xhat: Vec<f64>, shape: &[usize], gamma: &Tensor, beta: &Tensor, op: &'static str) -> Result<Tensor> {
    let c = *shape.last().unwrap_or(&1);
    if gamma.numel() != c || beta.numel() != c {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = xhat;
    for row in out.chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::from_parts(shape.to_vec(), out).check_finite(op)
}

/// Group normalization over the last axis: each row's channels are split
/// into `groups` contiguous groups normalized independently.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let stats = group_stats(x, groups, eps)?;
    affine(stats.xhat, x.shape(), gamma, beta, "group_norm")
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let stats = group_stats(x, 1, eps)?;
    affine(stats.xhat, x.shape(), gamma, beta, "layer_norm")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn fresh(channels: usize, momentum: f64) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }
}

pub(crate) struct BatchStats {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Column statistics over all rows (biased variance).
pub(crate) fn batch_stats(x: &Tensor, eps: f64) -> Result<BatchStats> {
    let (n, c) = (x.rows(), x.cols());
    if n < 2 {
        return Err(NumericsError::BatchTooSmall(n));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    for row in xd.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for row in xd.chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    for (orow, row) in xhat.chunks_mut(c).zip(xd.chunks(c)) {
        for j in 0..c {
            orow[j] = (row[j] - mean[j]) * inv_std[j];
        }
    }
    Ok(BatchStats {
        xhat,
        inv_std,
        mean,
        var,
    })
}

pub(crate) fn eval_stats(x: &Tensor, running: &RunningStats, eps: f64) -> Result<GroupStats> {
    let c = x.cols();
    if running.mean.len() != c || running.var.len() != c {
        return Err(NumericsError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: vec![running.mean.len()],
        });
    }
    let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.data().to_vec();
    for row in xhat.chunks_mut(c) {
        for j in 0..c {
            row[j] = (row[j] - running.mean[j]) * inv_std[j];
        }
    }
    Ok(GroupStats { xhat, inv_std })
}

pub(crate) fn update_running(running: &RunningStats, mean: &[f64], var: &[f64]) -> RunningStats {
    let m = running.momentum;
    let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
        old.iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n).collect()
    };
    RunningStats {
        mean: blend(&running.mean, mean),
        var: blend(&running.var, var),
        momentum: m,
    }
}

/// Batch normalization over the rows of a `N×C` tensor. In train mode the
/// output uses batch statistics and the returned running stats are blended
/// with `momentum`; in eval mode the running stats are used and returned
/// unchanged.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    mode: NormMode,
    eps: f64,
) -> Result<(Tensor, RunningStats)> {
    match mode {
        NormMode::Train => {
            let stats = batch_stats(x, eps)?;
            let out = affine(stats.xhat, x.shape(), gamma, beta, "batch_norm")?;
            Ok((out, update_running(running, &stats.mean, &stats.var)))
        }
        NormMode::Eval => {
            let stats = eval_stats(x, running, eps)?;
            let out = affine(stats.xhat, x.shape(), gamma, beta, "batch_norm")?;
            Ok((out, running.clone()))
        }
    }
}

pub fn swish(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Gated linear unit over the last axis: first half gated by sigmoid of the second.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let c2 = x.cols();
    if c2 % 2 != 0 {
        return Err(NumericsError::OddGlu(c2));
    }
    let c = c2 / 2;
    let mut out = Vec::with_capacity(x.numel() / 2);
    for row in x.data().chunks(c2) {
        for j in 0..c {
            out.push(row[j] * sigmoid(row[c + j]));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    Ok(Tensor::from_parts(shape, out))
}

/// Averages each length-`seq_len` sequence of a stacked `(B·T)×C` tensor into one row.
pub fn mean_pool(x: &Tensor, seq_len: usize) -> Result<Tensor> {
    let c = x.cols();
    if seq_len == 0 || x.rows() % seq_len != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "mean_pool",
            lhs: x.shape().to_vec(),
            rhs: vec![seq_len],
        });
    }
    let b = x.rows() / seq_len;
    let mut out = vec![0.0; b * c];
    for (s, seq) in x.data().chunks(seq_len * c).enumerate() {
        let orow = &mut out[s * c..(s + 1) * c];
        for row in seq.chunks(c) {
            for (o, v) in orow.iter_mut().zip(row) {
                *o += v;
            }
        }
        orow.iter_mut().for_each(|o| *o /= seq_len as f64);
    }
    Ok(Tensor::from_parts(vec![b, c], out))
}

/// Mean cross-entropy of `B×K` logits against class labels, plus the softmax
/// probabilities.
pub(crate) fn cross_entropy_with_probs(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let k = logits.cols();
    if logits.rows() != labels.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NumericsError::LabelOutOfRange { label: bad, classes: k });
    }
    let mut probs = logits.data().to_vec();
    let mut loss = 0.0;
    for (row, &label) in probs.chunks_mut(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    let loss = loss / labels.len() as f64;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_probs(logits, labels).map(|(l, _)| l)
}

/// Multi-head scaled dot-product attention per sequence. `q`, `k`, `v` are
/// `(B·T)×(H·head_dim)`; returns the output and the attention probabilities
/// laid out `[B][H][T][T]`.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_len: usize,
    head_dim: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let width = q.cols();
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if head_dim == 0 || width % head_dim != 0 || seq_len == 0 || q.rows() % seq_len != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: vec![seq_len, head_dim],
        });
    }
    let heads = width / head_dim;
    let batch = q.rows() / seq_len;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
    let mut out = vec![0.0; qd.len()];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq_len * seq_len..(b * heads + h + 1) * seq_len * seq_len];
            for i in 0..seq_len {
                let qrow = &qd[(b * seq_len + i) * width + h * head_dim..][..head_dim];
                for j in 0..seq_len {
                    let krow = &kd[(b * seq_len + j) * width + h * head_dim..][..head_dim];
                    p[i * seq_len + j] = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
            }
            softmax_rows_in_place(p, seq_len);
            for i in 0..seq_len {
                let orow_start = (b * seq_len + i) * width + h * head_dim;
                for j in 0..seq_len {
                    let pij = p[i * seq_len + j];
                    let vrow = &vd[(b * seq_len + j) * width + h * head_dim..][..head_dim];
                    let orow = &mut out[orow_start..orow_start + head_dim];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += pij * x;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(q.shape().to_vec(), out).check_finite("attention")?, probs))
}
