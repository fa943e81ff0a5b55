//! Scene-level dataset classifier: multinomial logistic regression on a
//! 12-dimensional global descriptor.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::syndata::{PointCloud, Registry};
use crate::tensor::{softmax_row, Tensor};

pub const DESCRIPTOR_DIM: usize = 12;
const NN_QUERIES: usize = 256;

/// Extents, log point count, nearest-neighbor distance mean/std, height
/// mean/std, horizontal radius mean/std, fraction of points near the lowest
/// point, and log points per occupied 0.5 m cell. Invariant to point order.
pub fn descriptor(cloud: &PointCloud) -> Result<[f64; DESCRIPTOR_DIM]> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::Input("descriptor needs at least two points".into()));
    }
    let mut pts = cloud.coords.clone();
    pts.sort_by(|p, q| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])).then(p[2].total_cmp(&q[2])));
    let pts = &pts;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut centroid = [0.0; 2];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
        centroid[0] += p[0] / n as f64;
        centroid[1] += p[1] / n as f64;
    }
    let (z_mean, z_std) = mean_std(pts.iter().map(|p| p[2]));
    let (r_mean, r_std) = mean_std(pts.iter().map(|p| ((p[0] - centroid[0]).powi(2) + (p[1] - centroid[1]).powi(2)).sqrt()));
    let low = pts.iter().filter(|p| p[2] < lo[2] + 0.2).count() as f64 / n as f64;
    let cells: HashSet<[i64; 3]> = pts.iter().map(|p| p.map(|v| (v / 0.5).floor() as i64)).collect();

    let q = n.min(NN_QUERIES);
    let nn: Vec<f64> = (0..q)
        .map(|j| {
            let p = pts[j * n / q];
            pts.iter()
                .map(|o| (p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2) + (p[2] - o[2]).powi(2))
                .filter(|d| *d > 0.0)
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .filter(|d| d.is_finite())
        .collect();
    let (nn_mean, nn_std) = mean_std(nn.iter().copied());
    Ok([
        hi[0] - lo[0],
        hi[1] - lo[1],
        hi[2] - lo[2],
        (n as f64).ln(),
        nn_mean,
        nn_std,
        z_mean - lo[2],
        z_std,
        r_mean,
        r_std,
        low,
        (n as f64 / cells.len() as f64).ln(),
    ])
}

fn mean_std(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub l2: f64,
    pub tol: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            max_iters: 5000,
            lr: 0.5,
            l2: 1e-3,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetClassifier {
    pub names: Vec<String>,
    pub mean: [f64; DESCRIPTOR_DIM],
    pub std: [f64; DESCRIPTOR_DIM],
    /// `DESCRIPTOR_DIM×K`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

impl DatasetClassifier {
    /// Full-batch gradient descent on standardized descriptors until the
    /// gradient norm falls below `tol` or `max_iters` is reached.
    pub fn fit(names: Vec<String>, x: &[[f64; DESCRIPTOR_DIM]], y: &[usize], cfg: &ClassifierConfig) -> Result<Self> {
        let k = names.len();
        if k < 2 {
            return Err(Error::Config("dataset classifier needs at least two datasets".into()));
        }
        if x.is_empty() || x.len() != y.len() || y.iter().any(|&c| c >= k) {
            return Err(Error::Input("classifier inputs and labels do not line up".into()));
        }
        let n = x.len() as f64;
        let mut mean = [0.0; DESCRIPTOR_DIM];
        let mut std = [0.0; DESCRIPTOR_DIM];
        for a in 0..DESCRIPTOR_DIM {
            let (m, s) = mean_std(x.iter().map(|r| r[a]));
            mean[a] = m;
            std[a] = if s > 1e-12 { s } else { 1.0 };
        }
        let z: Vec<[f64; DESCRIPTOR_DIM]> = x.iter().map(|r| standardize(r, &mean, &std)).collect();
        let mut w = vec![0.0; DESCRIPTOR_DIM * k];
        let mut b = vec![0.0; k];
        let mut iterations = 0;
        let mut gnorm = f64::INFINITY;
        for it in 0..cfg.max_iters {
            let mut gw = vec![0.0; DESCRIPTOR_DIM * k];
            let mut gb = vec![0.0; k];
            for (row, &label) in z.iter().zip(y) {
                let mut p = logits(row, &w, &b, k);
                softmax_row(&mut p);
                p[label] -= 1.0;
                for c in 0..k {
                    gb[c] += p[c] / n;
                    for a in 0..DESCRIPTOR_DIM {
                        gw[a * k + c] += row[a] * p[c] / n;
                    }
                }
            }
            for (g, wv) in gw.iter_mut().zip(&w) {
                *g += cfg.l2 * wv;
            }
            gnorm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
            iterations = it + 1;
            if gnorm < cfg.tol {
                break;
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= cfg.lr * g;
            }
            for (bv, g) in b.iter_mut().zip(&gb) {
                *bv -= cfg.lr * g;
            }
        }
        Ok(DatasetClassifier {
            names,
            mean,
            std,
            weights: Tensor::new(vec![DESCRIPTOR_DIM, k], w)?,
            bias: b,
            iterations,
            final_grad_norm: gnorm,
        })
    }

    pub fn predict_descriptor(&self, d: &[f64; DESCRIPTOR_DIM]) -> usize {
        let k = self.names.len();
        let l = logits(&standardize(d, &self.mean, &self.std), self.weights.data(), &self.bias, k);
        let mut best = 0;
        for c in 1..k {
            if l[c] > l[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        Ok(self.predict_descriptor(&descriptor(cloud)?))
    }

    pub fn accuracy(&self, x: &[[f64; DESCRIPTOR_DIM]], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(d, &l)| self.predict_descriptor(d) == l).count();
        hits as f64 / x.len().max(1) as f64
    }
}

fn standardize(r: &[f64; DESCRIPTOR_DIM], mean: &[f64; DESCRIPTOR_DIM], std: &[f64; DESCRIPTOR_DIM]) -> [f64; DESCRIPTOR_DIM] {
    std::array::from_fn(|a| (r[a] - mean[a]) / std[a])
}

fn logits(row: &[f64; DESCRIPTOR_DIM], w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .map(|c| b[c] + (0..DESCRIPTOR_DIM).map(|a| row[a] * w[a * k + c]).sum::<f64>())
        .collect()
}

/// Descriptors and dataset indices of the training (`val = false`) or
/// validation scenes of every non-held-out dataset.
pub fn descriptors(registry: &Registry, val: bool) -> Result<(Vec<[f64; DESCRIPTOR_DIM]>, Vec<usize>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (k, d) in registry.training().into_iter().enumerate() {
        for c in if val { &d.val } else { &d.train } {
            x.push(descriptor(c)?);
            y.push(k);
        }
    }
    Ok((x, y))
}

/// Fits the classifier on the training scenes of every training dataset.
pub fn train_dataset_classifier(registry: &Registry, cfg: &ClassifierConfig) -> Result<DatasetClassifier> {
    let names: Vec<String> = registry.training().iter().map(|d| d.spec.name.clone()).collect();
    if names.len() < 2 {
        return Err(Error::Config("dataset classifier needs at least two training datasets".into()));
    }
    let (x, y) = descriptors(registry, false)?;
    DatasetClassifier::fit(names, &x, &y, cfg)
}
