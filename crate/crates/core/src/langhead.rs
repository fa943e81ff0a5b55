//! Classification by cosine similarity to class-name embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_LOGIT_SCALE: f64 = 10.0;
pub const IGNORE_INDEX: i64 = -1;

/// Class name → unit vector, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable {
    dim: usize,
    names: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ClassEmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("embedding dim must be >= 1".into()));
        }
        Ok(ClassEmbeddingTable {
            dim,
            names: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        })
    }

    /// Adds `name`, normalizing `v` to unit length.
    pub fn insert(&mut self, name: &str, mut v: Vec<f64>) -> Result<()> {
        if name.is_empty() || name.contains('\t') || name.contains('\n') {
            return Err(Error::Format(format!("invalid class name {name:?}")));
        }
        if v.len() != self.dim {
            return Err(Error::Format(format!(
                "class {name:?} has {} components, table dim is {}",
                v.len(),
                self.dim
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::Format(format!("duplicate class {name:?}")));
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Format(format!("class {name:?} cannot be normalized (norm {norm:e})")));
        }
        v.iter_mut().for_each(|a| *a /= norm);
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.vectors.push(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.vectors[i].as_slice())
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        Some(dot(self.get(a)?, self.get(b)?))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
        let dim = head
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("first line must be dim=<E>, got {head:?}")))?;
        let mut table = ClassEmbeddingTable::new(dim)?;
        for (n, line) in lines {
            let (name, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: expected name<TAB>values", n + 1)))?;
            let v = rest
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            table
                .insert(name, v)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Text form with shortest round-trip float formatting.
    pub fn to_text(&self) -> String {
        let mut s = format!("dim={}\n", self.dim);
        for (name, v) in self.names.iter().zip(&self.vectors) {
            s.push_str(name);
            s.push('\t');
            for (i, a) in v.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{a:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// `E×C` matrix whose columns are the embeddings of `space`'s classes.
    pub fn class_matrix(&self, space: &LabelSpace) -> Result<Tensor> {
        let c = space.classes.len();
        let mut m = Tensor::zeros(&[self.dim, c]);
        for (j, name) in space.classes.iter().enumerate() {
            let v = self.get(name).ok_or_else(|| {
                Error::Config(format!(
                    "class {name:?} of dataset {:?} has no embedding",
                    space.dataset
                ))
            })?;
            for (i, a) in v.iter().enumerate() {
                m.data_mut()[i * c + j] = *a;
            }
        }
        Ok(m)
    }
}

/// Seeded table: classes get orthonormal random directions, except that each
/// `(base, related, cos)` triple places `related` at cosine `cos` from `base`.
pub fn synthetic_table(
    dim: usize,
    seed: u64,
    classes: &[&str],
    related: &[(&str, &str, f64)],
) -> Result<ClassEmbeddingTable> {
    if classes.len() > dim {
        return Err(Error::Config(format!(
            "{} classes need embedding dim >= {}, got {dim}",
            classes.len(),
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes.len());
    while basis.len() < classes.len() {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(a, bb)| *a -= p * bb);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let pos = |name: &str| classes.iter().position(|c| *c == name);
    let mut table = ClassEmbeddingTable::new(dim)?;
    for (i, name) in classes.iter().enumerate() {
        let v = match related.iter().find(|(_, r, _)| r == name) {
            Some((base, _, cos)) => {
                let b = pos(base).ok_or_else(|| Error::Config(format!("unknown related class {base:?}")))?;
                if !(-1.0..=1.0).contains(cos) {
                    return Err(Error::Config(format!("cosine {cos} outside [-1, 1]")));
                }
                let s = (1.0 - cos * cos).sqrt();
                basis[b].iter().zip(&basis[i]).map(|(x, y)| cos * x + s * y).collect()
            }
            None => basis[i].clone(),
        };
        table.insert(name, v)?;
    }
    Ok(table)
}

/// Ordered class names one dataset is supervised and evaluated on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub dataset: String,
    pub classes: Vec<String>,
}

impl LabelSpace {
    pub fn new(dataset: &str, classes: &[&str]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config(format!("dataset {dataset:?} has no classes")));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(Error::Config(format!("dataset {dataset:?} lists {c:?} twice")));
            }
        }
        Ok(LabelSpace {
            dataset: dataset.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn validate(&self, table: &ClassEmbeddingTable) -> Result<()> {
        table.class_matrix(self).map(|_| ())
    }
}

/// `s · cos(feature, class)` for every token and class of the space, given
/// the `E×C` class matrix.
pub fn class_logits(tape: &mut Tape, features: Var, class_matrix: &Tensor, scale: f64) -> Result<Var> {
    let e = tape.value(features).cols();
    if tape.value(features).rank() != 2 || e != class_matrix.rows() {
        return Err(Error::dim(
            "class_logits",
            format!(
                "features {:?} vs embedding dim {}",
                tape.value(features).shape(),
                class_matrix.rows()
            ),
        ));
    }
    let f = tape.l2_normalize_rows(features)?;
    let m = tape.constant(class_matrix.clone());
    let cos = tape.matmul(f, m)?;
    Ok(tape.scale(cos, scale))
}

/// Mean cross-entropy over tokens whose label is not [`IGNORE_INDEX`].
pub fn masked_cross_entropy(tape: &mut Tape, logits: Var, labels: &[i64]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Argmax of the cosine logits per row; ties go to the lower class index.
pub fn predict(features: &Tensor, class_matrix: &Tensor, scale: f64) -> Result<Vec<usize>> {
    let (t, e) = features.expect_matrix("predict")?;
    if e != class_matrix.rows() {
        return Err(Error::dim(
            "predict",
            format!("features {:?} vs embedding dim {}", features.shape(), class_matrix.rows()),
        ));
    }
    let c = class_matrix.cols();
    let mut out = Vec::with_capacity(t);
    for r in 0..t {
        let row = features.row(r);
        let n = dot(row, row).sqrt().max(1e-12);
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..c {
            let s = scale * (0..e).map(|i| row[i] * class_matrix.get(i, j)).sum::<f64>() / n;
            if s > best.1 {
                best = (j, s);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
