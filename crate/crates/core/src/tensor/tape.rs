use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::kernels::{dot, gemm, sigmoid, softmax, softmax_row, NormKind};
use super::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running per-channel statistics of a batch-normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Gain and bias tables of a normalization site.
///
/// `gain` and `bias` are `G×D` (or `D` when `G = 1`). `groups` assigns each
/// token a table row; `None` means every token uses row 0.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
    pub groups: Option<Arc<Vec<usize>>>,
}

enum NormMode {
    BatchTrain,
    /// Batch norm in evaluation mode: per-channel affine map from running stats.
    BatchEval,
    Layer,
    Rms,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Silu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Normalize {
        x: Var,
        gain: Var,
        bias: Var,
        groups: Option<Arc<Vec<usize>>>,
        mode: NormMode,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Take {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    RowScale {
        x: Var,
        s: Var,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        windows: Arc<Vec<Range<usize>>>,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        groups: Arc<Vec<usize>>,
        counts: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass; [`Tape::backward`] consumes it.
///
/// Nodes are appended in evaluation order, so every node's parents precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the `requires_grad` leaves, keyed by their [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let y = tb.item();
            let data = ta.data().iter().map(|x| f(*x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else {
            Err(Error::dim(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    /// Elementwise sum; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * c).collect(),
        };
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`D` bias to every row of a `T×D` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.value(x).expect_matrix("add_bias")?;
        if self.value(b).numel() != d {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + bias {:?}", self.value(x).shape(), self.value(b).shape()),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * sigmoid(*v)).collect(),
        };
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Normalizes a `T×D` matrix and applies per-group gain and bias.
    ///
    /// Batch kind normalizes each channel over tokens: batch statistics in
    /// training (updating `stats` with momentum 0.1), running statistics
    /// otherwise. Layer and RMS kinds normalize each token over channels.
    pub fn normalize(
        &mut self,
        x: Var,
        kind: NormKind,
        affine: &NormParams,
        stats: Option<&mut RunningStats>,
        training: bool,
    ) -> Result<Var> {
        let (t, d) = self.value(x).expect_matrix("normalize")?;
        let gain = self.value(affine.gain);
        let bias = self.value(affine.bias);
        if gain.numel() == 0 || gain.numel() % d != 0 || bias.numel() != gain.numel() {
            return Err(Error::dim(
                "normalize",
                format!(
                    "input {:?} with gain {:?} and bias {:?}",
                    self.value(x).shape(),
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let tables = gain.numel() / d;
        if let Some(g) = &affine.groups {
            if g.len() != t || g.iter().any(|&r| r >= tables) {
                return Err(Error::dim(
                    "normalize",
                    format!("group map of {} entries for {t} tokens and {tables} tables", g.len()),
                ));
            }
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; t * d];
        let (mode, inv) = match kind {
            NormKind::Batch if training => {
                if t < 2 {
                    return Err(Error::DegenerateBatch);
                }
                let mut mean = vec![0.0; d];
                for row in xs.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= t as f64);
                let mut var = vec![0.0; d];
                for row in xs.chunks(d) {
                    for c in 0..d {
                        let z = row[c] - mean[c];
                        var[c] += z * z;
                    }
                }
                var.iter_mut().for_each(|v| *v /= t as f64);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                for (r, row) in xs.chunks(d).enumerate() {
                    for c in 0..d {
                        xhat[r * d + c] = (row[c] - mean[c]) * inv[c];
                    }
                }
                if let Some(s) = stats {
                    if s.mean.len() != d {
                        return Err(Error::dim("normalize", "running stats width"));
                    }
                    let unbias = t as f64 / (t as f64 - 1.0);
                    for c in 0..d {
                        s.mean[c] = (1.0 - BN_MOMENTUM) * s.mean[c] + BN_MOMENTUM * mean[c];
                        s.var[c] = (1.0 - BN_MOMENTUM) * s.var[c] + BN_MOMENTUM * var[c] * unbias;
                    }
                }
                (NormMode::BatchTrain, inv)
            }
            NormKind::Batch => {
                let s = stats.ok_or_else(|| {
                    Error::Contract("batch normalization in eval mode needs running stats".into())
                })?;
                if s.mean.len() != d {
                    return Err(Error::dim("normalize", "running stats width"));
                }
                let inv: Vec<f64> = s.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                for (r, row) in xs.chunks(d).enumerate() {
                    for c in 0..d {
                        xhat[r * d + c] = (row[c] - s.mean[c]) * inv[c];
                    }
                }
                (NormMode::BatchEval, inv)
            }
            NormKind::Layer => {
                let mut inv = vec![0.0; t];
                for (r, row) in xs.chunks(d).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    inv[r] = 1.0 / (var + NORM_EPS).sqrt();
                    for c in 0..d {
                        xhat[r * d + c] = (row[c] - mean) * inv[r];
                    }
                }
                (NormMode::Layer, inv)
            }
            NormKind::Rms => {
                let mut inv = vec![0.0; t];
                for (r, row) in xs.chunks(d).enumerate() {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    inv[r] = 1.0 / (ms + NORM_EPS).sqrt();
                    for c in 0..d {
                        xhat[r * d + c] = row[c] * inv[r];
                    }
                }
                (NormMode::Rms, inv)
            }
        };
        let (gd, bd) = (gain.data(), bias.data());
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let g = affine.groups.as_ref().map_or(0, |g| g[r]) * d;
            for c in 0..d {
                out[r * d + c] = xhat[r * d + c] * gd[g + c] + bd[g + c];
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let op = Op::Normalize {
            x,
            gain: affine.gain,
            bias: affine.bias,
            groups: affine.groups.clone(),
            mode,
            xhat,
            inv,
        };
        Ok(self.push(value, op, &[x, affine.gain, affine.bias]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (t, d) = self.value(x).expect_matrix("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {t}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx }, &[x]))
    }

    /// Picks elements by flat row-major index into a tensor of `shape`.
    pub fn take(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("take", format!("index {bad} of {}", src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Take { x, idx }, &[x]))
    }

    /// Writes row `i` of `x` into row `idx[i]` of a zero `rows×D` matrix,
    /// summing collisions.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let (r, d) = self.value(x).expect_matrix("scatter_rows")?;
        if idx.len() != r || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim("scatter_rows", format!("{r} rows into {rows}")));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        let src = self.value(x);
        for (i, &dst) in idx.iter().enumerate() {
            for (o, v) in out.data_mut()[dst * d..(dst + 1) * d].iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterRows { x, idx }, &[x]))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, d) = self.value(x).expect_matrix("row_scale")?;
        if self.value(s).numel() != r {
            return Err(Error::dim(
                "row_scale",
                format!("{:?} by {:?}", self.value(x).shape(), self.value(s).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (row, k) in out.data_mut().chunks_mut(d).zip(sv) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(out, Op::RowScale { x, s }, &[x, s]))
    }

    /// Multi-head attention computed independently inside each window.
    /// Tokens outside every window produce zero rows.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        windows: Arc<Vec<Range<usize>>>,
        heads: usize,
    ) -> Result<Var> {
        let probs = super::kernels::attention_weights(self.value(q), self.value(k), &windows, heads)?;
        same_shape("window_attention", self.value(q), self.value(v))?;
        let (t, d) = self.value(q).expect_matrix("window_attention")?;
        let dh = d / heads;
        let vt = self.value(v);
        let mut out = vec![0.0; t * d];
        for (wi, w) in windows.iter().enumerate() {
            let n = w.len();
            for h in 0..heads {
                let p = &probs[wi * heads + h];
                for i in 0..n {
                    let o = &mut out[(w.start + i) * d + h * dh..(w.start + i) * d + (h + 1) * dh];
                    for j in 0..n {
                        let pij = p[i * n + j];
                        let vj = &vt.row(w.start + j)[h * dh..(h + 1) * dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += pij * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let flat: Vec<f64> = probs.into_iter().flatten().collect();
        let op = Op::WindowAttention {
            q,
            k,
            v,
            windows,
            heads,
            probs: flat,
        };
        Ok(self.push(value, op, &[q, k, v]))
    }

    /// Mean of the rows sharing each group id; output is `num_groups×D`.
    pub fn segment_mean(&mut self, x: Var, groups: Arc<Vec<usize>>, num_groups: usize) -> Result<Var> {
        let (t, d) = self.value(x).expect_matrix("segment_mean")?;
        if groups.len() != t || groups.iter().any(|&g| g >= num_groups) {
            return Err(Error::dim("segment_mean", "group map does not match rows"));
        }
        let mut counts = vec![0usize; num_groups];
        let mut out = vec![0.0; num_groups * d];
        let src = self.value(x);
        for (r, &g) in groups.iter().enumerate() {
            counts[g] += 1;
            for (o, v) in out[g * d..(g + 1) * d].iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Consistency("segment_mean: empty group".into()));
        }
        for (g, row) in out.chunks_mut(d).enumerate() {
            row.iter_mut().for_each(|v| *v /= counts[g] as f64);
        }
        let value = Tensor::new(vec![num_groups, d], out)?;
        Ok(self.push(value, Op::SegmentMean { x, groups, counts }, &[x]))
    }

    /// Scales each row to unit L2 norm (norms are floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).expect_matrix("l2_normalize_rows")?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(d) {
            let n = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Mean softmax cross-entropy over rows whose label is not `-1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let (t, c) = self.value(logits).expect_matrix("cross_entropy")?;
        if labels.len() != t {
            return Err(Error::dim(
                "cross_entropy",
                format!("{t} rows but {} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < -1 || l >= c as i64) {
            return Err(Error::Input(format!("label {bad} outside [-1, {c})")));
        }
        let count = labels.iter().filter(|&&l| l >= 0).count();
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let l = labels[r];
            if l < 0 {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l as usize];
            softmax_row(row);
        }
        let value = Tensor::scalar(loss / count as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            count,
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        // Gradient buffer of a parent, allocated on first use; None when the
        // parent does not participate in differentiation.
        macro_rules! grad_of {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.map.insert(Var(i), t);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let n = nodes[b.0].value.cols();
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(ga) = grad_of!(*a) {
                        gemm(m, n, k, &g, false, bv, true, ga, 1.0);
                    }
                    if let Some(gb) = grad_of!(*b) {
                        gemm(k, m, n, av, true, &g, false, gb, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = grad_of!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    let scalar_b = nodes[b.0].value.shape() != node.value.shape();
                    if let Some(gb) = grad_of!(*b) {
                        if scalar_b {
                            gb[0] += g.iter().sum::<f64>();
                        } else {
                            gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let scalar_b = nodes[b.0].value.shape() != node.value.shape();
                    if let Some(ga) = grad_of!(*a) {
                        if scalar_b {
                            ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y * bv[0]);
                        } else {
                            for j in 0..g.len() {
                                ga[j] += g[j] * bv[j];
                            }
                        }
                    }
                    if let Some(gb) = grad_of!(*b) {
                        if scalar_b {
                            gb[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                        } else {
                            for j in 0..g.len() {
                                gb[j] += g[j] * av[j];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(ga) = grad_of!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y * c);
                    }
                }
                Op::AddBias(x, b) => {
                    if let Some(gx) = grad_of!(*x) {
                        gx.iter_mut().zip(&g).for_each(|(p, q)| *p += q);
                    }
                    let d = nodes[b.0].value.numel();
                    if let Some(gb) = grad_of!(*b) {
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(gx) = grad_of!(*x) {
                        for j in 0..g.len() {
                            if xv[j] > 0.0 {
                                gx[j] += g[j];
                            }
                        }
                    }
                }
                Op::Silu(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(gx) = grad_of!(*x) {
                        for j in 0..g.len() {
                            let s = sigmoid(xv[j]);
                            gx[j] += g[j] * (s + xv[j] * s * (1.0 - s));
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    if let Some(gx) = grad_of!(*x) {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let base = o * len * inner + ii;
                                let s: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                                for j in 0..len {
                                    let p = base + j * inner;
                                    gx[p] += y[p] * (g[p] - s);
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = grad_of!(*x) {
                        gx.iter_mut().for_each(|v| *v += g[0]);
                    }
                }
                Op::Normalize {
                    x,
                    gain,
                    bias,
                    groups,
                    mode,
                    xhat,
                    inv,
                } => {
                    let (t, d) = (node.value.rows(), node.value.cols());
                    let gv = nodes[gain.0].value.data();
                    let grp = |r: usize| groups.as_ref().map_or(0, |m| m[r]) * d;
                    if let Some(gg) = grad_of!(*gain) {
                        for r in 0..t {
                            let o = grp(r);
                            for c in 0..d {
                                gg[o + c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    if let Some(gb) = grad_of!(*bias) {
                        for r in 0..t {
                            let o = grp(r);
                            for c in 0..d {
                                gb[o + c] += g[r * d + c];
                            }
                        }
                    }
                    if let Some(gx) = grad_of!(*x) {
                        let mut dxhat = vec![0.0; t * d];
                        for r in 0..t {
                            let o = grp(r);
                            for c in 0..d {
                                dxhat[r * d + c] = g[r * d + c] * gv[o + c];
                            }
                        }
                        match mode {
                            NormMode::BatchTrain => {
                                let mut s1 = vec![0.0; d];
                                let mut s2 = vec![0.0; d];
                                for r in 0..t {
                                    for c in 0..d {
                                        s1[c] += dxhat[r * d + c];
                                        s2[c] += dxhat[r * d + c] * xhat[r * d + c];
                                    }
                                }
                                let tf = t as f64;
                                for r in 0..t {
                                    for c in 0..d {
                                        let j = r * d + c;
                                        gx[j] += inv[c] / tf * (tf * dxhat[j] - s1[c] - xhat[j] * s2[c]);
                                    }
                                }
                            }
                            NormMode::BatchEval => {
                                for r in 0..t {
                                    for c in 0..d {
                                        gx[r * d + c] += dxhat[r * d + c] * inv[c];
                                    }
                                }
                            }
                            NormMode::Layer => {
                                let df = d as f64;
                                for r in 0..t {
                                    let dr = &dxhat[r * d..(r + 1) * d];
                                    let xr = &xhat[r * d..(r + 1) * d];
                                    let s1: f64 = dr.iter().sum();
                                    let s2 = dot(dr, xr);
                                    for c in 0..d {
                                        gx[r * d + c] += inv[r] / df * (df * dr[c] - s1 - xr[c] * s2);
                                    }
                                }
                            }
                            NormMode::Rms => {
                                let df = d as f64;
                                for r in 0..t {
                                    let dr = &dxhat[r * d..(r + 1) * d];
                                    let xr = &xhat[r * d..(r + 1) * d];
                                    let m = dot(dr, xr) / df;
                                    for c in 0..d {
                                        gx[r * d + c] += inv[r] * (dr[c] - xr[c] * m);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let d = node.value.cols();
                    if let Some(gx) = grad_of!(*x) {
                        for (r, &src) in idx.iter().enumerate() {
                            for c in 0..d {
                                gx[src * d + c] += g[r * d + c];
                            }
                        }
                    }
                }
                Op::Take { x, idx } => {
                    if let Some(gx) = grad_of!(*x) {
                        for (j, &src) in idx.iter().enumerate() {
                            gx[src] += g[j];
                        }
                    }
                }
                Op::ScatterRows { x, idx } => {
                    let d = node.value.cols();
                    if let Some(gx) = grad_of!(*x) {
                        for (r, &dst) in idx.iter().enumerate() {
                            for c in 0..d {
                                gx[r * d + c] += g[dst * d + c];
                            }
                        }
                    }
                }
                Op::RowScale { x, s } => {
                    let d = node.value.cols();
                    let xv = nodes[x.0].value.data();
                    let sv = nodes[s.0].value.data();
                    if let Some(gx) = grad_of!(*x) {
                        for (r, k) in sv.iter().enumerate() {
                            for c in 0..d {
                                gx[r * d + c] += g[r * d + c] * k;
                            }
                        }
                    }
                    if let Some(gs) = grad_of!(*s) {
                        for r in 0..sv.len() {
                            gs[r] += dot(&g[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::WindowAttention {
                    q,
                    k,
                    v,
                    windows,
                    heads,
                    probs,
                } => {
                    let d = node.value.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let t = node.value.rows();
                    let (qv, kv, vv) = (
                        nodes[q.0].value.data(),
                        nodes[k.0].value.data(),
                        nodes[v.0].value.data(),
                    );
                    let mut dq = vec![0.0; t * d];
                    let mut dk = vec![0.0; t * d];
                    let mut dv = vec![0.0; t * d];
                    let mut offset = 0;
                    for w in windows.iter() {
                        let n = w.len();
                        for h in 0..*heads {
                            let p = &probs[offset..offset + n * n];
                            offset += n * n;
                            let at = |i: usize| -> Range<usize> {
                                (w.start + i) * d + h * dh..(w.start + i) * d + (h + 1) * dh
                            };
                            let mut ds = vec![0.0; n * n];
                            for i in 0..n {
                                let go = &g[at(i)];
                                let mut row_dot = 0.0;
                                for j in 0..n {
                                    let dp = dot(go, &vv[at(j)]);
                                    ds[i * n + j] = dp;
                                    row_dot += dp * p[i * n + j];
                                }
                                for j in 0..n {
                                    ds[i * n + j] = p[i * n + j] * (ds[i * n + j] - row_dot);
                                }
                            }
                            for i in 0..n {
                                let gi = at(i);
                                for j in 0..n {
                                    let pij = p[i * n + j];
                                    let sij = ds[i * n + j] * scale;
                                    let rj = at(j);
                                    for c in 0..dh {
                                        dv[rj.start + c] += pij * g[gi.start + c];
                                        dq[gi.start + c] += sij * kv[rj.start + c];
                                        dk[rj.start + c] += sij * qv[gi.start + c];
                                    }
                                }
                            }
                        }
                    }
                    for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if let Some(gv) = grad_of!(var) {
                            gv.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::SegmentMean { x, groups, counts } => {
                    let d = node.value.cols();
                    if let Some(gx) = grad_of!(*x) {
                        for (r, &grp) in groups.iter().enumerate() {
                            let inv = 1.0 / counts[grp] as f64;
                            for c in 0..d {
                                gx[r * d + c] += g[grp * d + c] * inv;
                            }
                        }
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    let d = node.value.cols();
                    let y = node.value.data();
                    if let Some(gx) = grad_of!(*x) {
                        for (r, n) in norms.iter().enumerate() {
                            let yr = &y[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let s = dot(yr, gr);
                            for c in 0..d {
                                gx[r * d + c] += (gr[c] - yr[c] * s) / n;
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    count,
                } => {
                    let c = nodes[logits.0].value.cols();
                    let scale = g[0] / *count as f64;
                    if let Some(gl) = grad_of!(*logits) {
                        for (r, &l) in labels.iter().enumerate() {
                            if l < 0 {
                                continue;
                            }
                            for j in 0..c {
                                let onehot = if j as i64 == l { 1.0 } else { 0.0 };
                                gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
