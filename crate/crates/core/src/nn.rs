//! Named parameters, running-statistics buffers and the forward context that
//! binds them onto a tape.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, NormKind, NormParams, RunningStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation {other:?} (expected relu or silu)"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        })
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.position(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Batch-normalization running statistics keyed by site name.
pub type BufferStore = BTreeMap<String, RunningStats>;

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for the parameter `name`. Depends only on `(seed, name)`, so adding or
/// removing other parameters never shifts this one's initial values.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weight matrix.
pub fn init_linear_weight(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let mut rng = param_rng(seed, name);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

/// Builder that registers parameters under a common seed.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub buffers: &'a mut BufferStore,
    pub seed: u64,
}

impl ParamBuilder<'_> {
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
        let w = init_linear_weight(self.seed, &format!("{name}.w"), d_in, d_out);
        self.store.insert(format!("{name}.w"), w)?;
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        }
        Ok(())
    }

    /// Weight without the `.w` suffix (used for routers).
    pub fn matrix(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        let w = init_linear_weight(self.seed, name, d_in, d_out);
        self.store.insert(name, w)?;
        Ok(())
    }

    /// Gain/bias tables with `tables` rows, plus running stats for batch norm.
    pub fn norm(&mut self, name: &str, kind: NormKind, dim: usize, tables: usize) -> Result<()> {
        self.store.insert(format!("{name}.gain"), Tensor::full(&[tables, dim], 1.0))?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[tables, dim]))?;
        if kind == NormKind::Batch {
            self.buffers.insert(name.to_string(), RunningStats::new(dim));
        }
        Ok(())
    }
}

/// One forward pass: a tape plus lazily bound parameter leaves.
///
/// Parameters are only placed on the tape when first requested, so a
/// parameter the pass never reads is never bound and gets no gradient.
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub buffers: &'a mut BufferStore,
    pub training: bool,
    track_grad: bool,
    /// Per-token normalization table index (dataset-conditioned norms).
    pub norm_groups: Option<Arc<Vec<usize>>>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamStore, buffers: &'a mut BufferStore, training: bool) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            buffers,
            training,
            track_grad: training,
            norm_groups: None,
        }
    }

    /// Forces gradient tracking on or off independently of the mode.
    pub fn with_grad(mut self, on: bool) -> Self {
        self.track_grad = on;
        self
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::Consistency(format!("missing parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.at(i).1.clone(), self.track_grad);
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.params.position(name).is_some_and(|i| self.bound[i].is_some())
    }

    /// `x·W + b` (bias optional, looked up as `{name}.b`).
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let y = self.tape.matmul(x, w)?;
        let bname = format!("{name}.b");
        if self.params.position(&bname).is_some() {
            let b = self.param(&bname)?;
            self.tape.add_bias(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.tape.relu(x),
            Activation::Silu => self.tape.silu(x),
        }
    }

    /// Normalization site `name`. Uses per-token tables when the gain has more
    /// than one row and `norm_groups` is set.
    pub fn norm(&mut self, x: Var, name: &str, kind: NormKind) -> Result<Var> {
        let gain = self.param(&format!("{name}.gain"))?;
        let bias = self.param(&format!("{name}.bias"))?;
        let tables = self.tape.value(gain).rows();
        let groups = if tables > 1 {
            let g = self.norm_groups.clone().ok_or_else(|| {
                Error::Consistency(format!("{name} has {tables} tables but no group map"))
            })?;
            Some(g)
        } else {
            None
        };
        let affine = NormParams { gain, bias, groups };
        let training = self.training;
        let stats = match kind {
            NormKind::Batch => Some(
                self.buffers
                    .get_mut(name)
                    .ok_or_else(|| Error::Consistency(format!("missing running stats {name}")))?,
            ),
            _ => None,
        };
        self.tape.normalize(x, kind, &affine, stats, training)
    }

    /// Parameter index and tape handle for every bound parameter.
    pub fn bindings(&self) -> Vec<(usize, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }

    /// Runs backward from `loss`; returns one gradient per parameter (zeros
    /// for parameters the pass did not touch), in store order.
    pub fn backward(self, loss: Var) -> Result<Vec<Tensor>> {
        let bindings = self.bindings();
        let params = self.params;
        let mut grads: Gradients = self.tape.backward(loss)?;
        let mut out: Vec<Option<Tensor>> = vec![None; params.len()];
        for (i, v) in bindings {
            out[i] = grads.take(v);
        }
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(params.at(i).1.shape())))
            .collect())
    }
}
