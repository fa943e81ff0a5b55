use std::ops::Range;

use super::Tensor;
use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c` for row-major buffers, where `op` optionally
/// transposes. Logical shapes are `m×k` and `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Max-shifted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// In-place softmax of one contiguous row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
    Rms,
}

impl std::str::FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            "rms" => Ok(NormKind::Rms),
            other => Err(Error::Config(format!(
                "unknown norm kind {other:?} (expected batch, layer or rms)"
            ))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::Rms => "rms",
        })
    }
}

/// Windowed multi-head attention probabilities: for each window and head, the
/// `n×n` row-stochastic matrix `softmax(Q Kᵀ / sqrt(d_h))`. Returned in
/// window-major, head-minor order.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    windows: &[Range<usize>],
    heads: usize,
) -> Result<Vec<Vec<f64>>> {
    let (t, d) = q.expect_matrix("attention")?;
    if k.shape() != q.shape() {
        return Err(Error::dim(
            "attention",
            format!("q {:?} vs k {:?}", q.shape(), k.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim("attention", format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(windows.len() * heads);
    for w in windows {
        if w.end > t {
            return Err(Error::dim("attention", format!("window {w:?} exceeds {t} tokens")));
        }
        let n = w.len();
        for h in 0..heads {
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q.row(w.start + i)[h * dh..(h + 1) * dh];
                for j in 0..n {
                    let kj = &k.row(w.start + j)[h * dh..(h + 1) * dh];
                    p[i * n + j] = dot(qi, kj) * scale;
                }
                softmax_row(&mut p[i * n..(i + 1) * n]);
            }
            out.push(p);
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
