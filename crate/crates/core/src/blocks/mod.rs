//! Serialized transformer blocks, voxel embedding, grid pooling/unpooling and
//! the encoder–decoder network.

mod network;

pub use network::{
    network_forward, LayerInfo, Model, ModelVariant, NetworkConfig, NetworkOutput, RoutingLog,
    StageConfig, StageKind,
};

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::moe::{self, MoEConfig, RecordSink, RoutingRecord};
use crate::nn::{Activation, Forward, ParamBuilder};
use crate::serialization::{morton_encode, serialize, voxelize, window_partition, VoxelGrid};
use crate::syndata::PointCloud;
use crate::tensor::{NormKind, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoePosition {
    Projection,
    Ffn,
    None,
}

impl std::str::FromStr for MoePosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(MoePosition::Projection),
            "ffn" => Ok(MoePosition::Ffn),
            "none" => Ok(MoePosition::None),
            other => Err(Error::Config(format!(
                "unknown moe position {other:?} (expected projection, ffn or none)"
            ))),
        }
    }
}

impl std::fmt::Display for MoePosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MoePosition::Projection => "projection",
            MoePosition::Ffn => "ffn",
            MoePosition::None => "none",
        })
    }
}

/// What sits at the MoE position of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    /// Routed experts.
    Moe,
    /// A single always-on expert MLP (`{prefix}.expert0`), no router.
    DenseExpert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub norm_kind: NormKind,
    pub moe_position: MoePosition,
    pub moe: MoEConfig,
    pub ffn_multiplier: f64,
    pub mixer: Mixer,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be >= 1".into()));
        }
        if !(self.ffn_multiplier > 0.0) {
            return Err(Error::Config("ffn_multiplier must be > 0".into()));
        }
        self.moe.validate()
    }

    pub fn activation(&self) -> Activation {
        self.moe.activation
    }

    fn ffn_hidden(&self) -> usize {
        ((self.ffn_multiplier * self.dim as f64).round() as usize).max(1)
    }
}

/// Voxelization settings shared by every scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelSettings {
    pub cell_size: f64,
    pub bits_per_axis: u32,
    /// Voxel-center offsets from the grid origin are divided by this (meters).
    pub coord_scale: f64,
}

impl Default for VoxelSettings {
    fn default() -> Self {
        VoxelSettings {
            cell_size: 0.25,
            bits_per_axis: 16,
            coord_scale: 4.0,
        }
    }
}

/// Serialized voxel tokens of a batch of scenes, concatenated.
#[derive(Clone, Debug)]
pub struct VoxelBatch {
    /// `T×(F+3)`: mean point features then voxel-center coordinates divided
    /// by `coord_scale`, horizontal axes relative to the grid origin and the
    /// vertical axis absolute.
    pub inputs: Tensor,
    pub codes: Vec<u64>,
    /// Token range of each scene.
    pub segments: Vec<Range<usize>>,
    /// Majority-vote label per token (`-1` when every point is ignored).
    pub labels: Vec<i64>,
    /// Dataset tag per scene.
    pub tags: Vec<Option<Arc<str>>>,
    /// Per scene, the global token index of every point.
    pub point_token: Vec<Vec<usize>>,
    pub clamped: usize,
}

impl VoxelBatch {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Majority vote over non-ignored labels; ties go to the smaller class id.
pub fn majority_label<I: IntoIterator<Item = i64>>(labels: I) -> i64 {
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    for l in labels {
        if l >= 0 {
            *hist.entry(l).or_default() += 1;
        }
    }
    let mut best = (-1, 0usize);
    for (l, c) in hist {
        if c > best.1 {
            best = (l, c);
        }
    }
    best.0
}

/// Voxelizes and serializes each scene; one token per occupied voxel. The
/// result is bitwise independent of the order of points within a scene.
pub fn voxelize_batch(clouds: &[&PointCloud], s: &VoxelSettings) -> Result<VoxelBatch> {
    let f = clouds.first().map_or(0, |c| c.num_feats);
    let width = f + 3;
    let mut inputs = Vec::new();
    let mut codes = Vec::new();
    let mut segments = Vec::with_capacity(clouds.len());
    let mut labels = Vec::new();
    let mut tags = Vec::with_capacity(clouds.len());
    let mut point_token = Vec::with_capacity(clouds.len());
    let mut clamped = 0;
    for cloud in clouds {
        if cloud.is_empty() {
            return Err(Error::Input("cannot embed an empty point cloud".into()));
        }
        if cloud.num_feats != f {
            return Err(Error::Input("scenes in a batch must share feature width".into()));
        }
        let grid = VoxelGrid::aligned(&cloud.coords, s.cell_size, s.bits_per_axis)?;
        let vox = voxelize(&cloud.coords, &grid)?;
        clamped += vox.clamped;
        let point_codes = vox
            .voxels
            .iter()
            .map(|v| morton_encode(*v, s.bits_per_axis))
            .collect::<Result<Vec<_>>>()?;
        let order = serialize(point_codes);
        let start = codes.len();
        let mut tok_of_point = vec![0usize; cloud.len()];
        let mut i = 0;
        while i < order.perm.len() {
            let code = order.codes[order.perm[i]];
            let mut j = i;
            while j < order.perm.len() && order.codes[order.perm[j]] == code {
                tok_of_point[order.perm[j]] = codes.len();
                j += 1;
            }
            let mut rows: Vec<&[f64]> = order.perm[i..j].iter().map(|&p| cloud.feat(p)).collect();
            rows.sort_by(|a, b| {
                a.iter()
                    .zip(*b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut sum = vec![0.0; f];
            for row in rows {
                for (a, v) in sum.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let n = (j - i) as f64;
            inputs.extend(sum.iter().map(|v| v / n));
            let center = grid.center(vox.voxels[order.perm[i]]);
            inputs.push((center[0] - grid.origin[0]) / s.coord_scale);
            inputs.push((center[1] - grid.origin[1]) / s.coord_scale);
            inputs.push(center[2] / s.coord_scale);
            labels.push(majority_label(order.perm[i..j].iter().map(|&p| cloud.labels[p])));
            codes.push(code);
            i = j;
        }
        segments.push(start..codes.len());
        tags.push(cloud.dataset_tag.clone());
        point_token.push(tok_of_point);
    }
    let t = codes.len();
    Ok(VoxelBatch {
        inputs: Tensor::new(vec![t, width], inputs)?,
        codes,
        segments,
        labels,
        tags,
        point_token,
        clamped,
    })
}

/// Token sequence flowing through the network.
#[derive(Clone, Debug)]
pub struct TokenState {
    pub features: Var,
    /// Non-decreasing within each segment.
    pub codes: Vec<u64>,
    pub segments: Vec<Range<usize>>,
    /// Fine token → coarse token, set once this state has been pooled.
    pub parent_map: Option<Vec<usize>>,
    pub labels: Vec<i64>,
    /// Dataset tag per segment (analytics only).
    pub tags: Vec<Option<Arc<str>>>,
    /// Normalization table per token (dataset-conditioned norms only).
    pub norm_groups: Option<Arc<Vec<usize>>>,
}

impl TokenState {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn segment_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (s, r) in self.segments.iter().enumerate() {
            out[r.clone()].iter_mut().for_each(|v| *v = s);
        }
        out
    }

    pub fn token_tags(&self) -> Vec<Option<Arc<str>>> {
        let mut out = vec![None; self.len()];
        for (s, r) in self.segments.iter().enumerate() {
            out[r.clone()].iter_mut().for_each(|v| *v = self.tags[s].clone());
        }
        out
    }

    /// Attention windows: each segment partitioned independently.
    pub fn windows(&self, window_size: usize) -> Result<Vec<Range<usize>>> {
        let mut out = Vec::new();
        for r in &self.segments {
            for w in window_partition(r.len(), window_size)? {
                out.push(r.start + w.start..r.start + w.end);
            }
        }
        Ok(out)
    }

    fn norm_groups_for(&self, segment_table: Option<&[usize]>) -> Option<Arc<Vec<usize>>> {
        segment_table.map(|tab| Arc::new(self.segment_of().into_iter().map(|s| tab[s]).collect()))
    }
}

/// Extra outputs of a block.
#[derive(Default)]
pub struct BlockAux {
    pub aux_loss: Option<Var>,
    /// Smallest gap between the k-th and (k+1)-th router logit.
    pub margin: f64,
}

/// Routing-record destination for one block invocation.
pub struct BlockSink<'a> {
    pub records: &'a mut Vec<RoutingRecord>,
    pub layer_id: usize,
}

pub fn build_block(b: &mut ParamBuilder<'_>, prefix: &str, cfg: &BlockConfig, norm_tables: usize) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    b.norm(&format!("{prefix}.norm1"), cfg.norm_kind, d, norm_tables)?;
    for name in ["q", "k", "v"] {
        b.linear(&format!("{prefix}.{name}"), d, d, true)?;
    }
    build_site(b, &format!("{prefix}.proj"), cfg, cfg.moe_position == MoePosition::Projection, false)?;
    b.norm(&format!("{prefix}.norm2"), cfg.norm_kind, d, norm_tables)?;
    build_site(b, &format!("{prefix}.ffn"), cfg, cfg.moe_position == MoePosition::Ffn, true)
}

fn build_site(b: &mut ParamBuilder<'_>, prefix: &str, cfg: &BlockConfig, moe_here: bool, ffn: bool) -> Result<()> {
    let d = cfg.dim;
    if moe_here {
        match cfg.mixer {
            Mixer::Moe => moe::build_params(b, prefix, d, &cfg.moe),
            Mixer::DenseExpert => moe::build_expert(b, &moe::expert_name(prefix, 0), d, cfg.moe.hidden(d)),
        }
    } else if ffn {
        b.linear(&format!("{prefix}.fc1"), d, cfg.ffn_hidden(), true)?;
        b.linear(&format!("{prefix}.fc2"), cfg.ffn_hidden(), d, true)
    } else {
        b.linear(prefix, d, d, true)
    }
}

fn site_forward(
    fw: &mut Forward<'_>,
    x: Var,
    prefix: &str,
    cfg: &BlockConfig,
    moe_here: bool,
    ffn: bool,
    tags: &[Option<Arc<str>>],
    sink: &mut Option<BlockSink<'_>>,
    aux: &mut BlockAux,
) -> Result<Var> {
    if moe_here {
        match cfg.mixer {
            Mixer::Moe => {
                let rec = sink.as_mut().map(|s| RecordSink {
                    records: &mut *s.records,
                    layer_id: s.layer_id,
                    tags,
                });
                let out = moe::moe_forward(fw, x, prefix, &cfg.moe, rec)?;
                aux.aux_loss = out.aux_loss;
                aux.margin = aux.margin.min(out.routing.margin);
                Ok(out.out)
            }
            Mixer::DenseExpert => {
                moe::expert_forward(fw, x, &moe::expert_name(prefix, 0), cfg.activation())
            }
        }
    } else if ffn {
        let h = fw.linear(x, &format!("{prefix}.fc1"))?;
        let h = fw.activation(h, cfg.activation());
        fw.linear(h, &format!("{prefix}.fc2"))
    } else {
        fw.linear(x, prefix)
    }
}

/// Pre-norm block: `x' = x + O(Attn(Norm(x)))`, `out = x' + FFN(Norm(x'))`,
/// with attention restricted to serialization windows and the MoE (when any)
/// at the output projection `O` or in the FFN.
pub fn attention_block(
    fw: &mut Forward<'_>,
    x: &TokenState,
    prefix: &str,
    cfg: &BlockConfig,
    mut sink: Option<BlockSink<'_>>,
) -> Result<(TokenState, BlockAux)> {
    let d = fw.tape.value(x.features).cols();
    if d != cfg.dim {
        return Err(Error::dim("attention_block", format!("features have {d} channels, block expects {}", cfg.dim)));
    }
    fw.norm_groups = x.norm_groups.clone();
    let mut aux = BlockAux {
        aux_loss: None,
        margin: f64::INFINITY,
    };
    let tags = if sink.is_some() { x.token_tags() } else { Vec::new() };
    let windows = Arc::new(x.windows(cfg.window_size)?);

    let xn = fw.norm(x.features, &format!("{prefix}.norm1"), cfg.norm_kind)?;
    let q = fw.linear(xn, &format!("{prefix}.q"))?;
    let k = fw.linear(xn, &format!("{prefix}.k"))?;
    let v = fw.linear(xn, &format!("{prefix}.v"))?;
    let a = fw.tape.window_attention(q, k, v, windows, cfg.num_heads)?;
    let proj_moe = cfg.moe_position == MoePosition::Projection;
    let o = site_forward(fw, a, &format!("{prefix}.proj"), cfg, proj_moe, false, &tags, &mut sink, &mut aux)?;
    let x1 = fw.tape.add(x.features, o)?;

    let yn = fw.norm(x1, &format!("{prefix}.norm2"), cfg.norm_kind)?;
    let ffn_moe = cfg.moe_position == MoePosition::Ffn;
    let f = site_forward(fw, yn, &format!("{prefix}.ffn"), cfg, ffn_moe, true, &tags, &mut sink, &mut aux)?;
    let out = fw.tape.add(x1, f)?;

    let mut next = x.clone();
    next.features = out;
    next.parent_map = None;
    Ok((next, aux))
}

/// Embedding of a voxel batch: `Linear → Norm → activation` to `embed_dim`.
pub fn build_embed(b: &mut ParamBuilder<'_>, in_features: usize, embed_dim: usize, kind: NormKind, tables: usize) -> Result<()> {
    b.linear("embed.fc", in_features, embed_dim, true)?;
    b.norm("embed.norm", kind, embed_dim, tables)
}

pub fn embed(
    fw: &mut Forward<'_>,
    batch: &VoxelBatch,
    kind: NormKind,
    act: Activation,
    segment_table: Option<&[usize]>,
) -> Result<TokenState> {
    if batch.is_empty() {
        return Err(Error::Input("empty voxel batch".into()));
    }
    let mut state = TokenState {
        features: fw.tape.constant(batch.inputs.clone()),
        codes: batch.codes.clone(),
        segments: batch.segments.clone(),
        parent_map: None,
        labels: batch.labels.clone(),
        tags: batch.tags.clone(),
        norm_groups: None,
    };
    state.norm_groups = state.norm_groups_for(segment_table);
    fw.norm_groups = state.norm_groups.clone();
    let h = fw.linear(state.features, "embed.fc")?;
    let h = fw.norm(h, "embed.norm", kind)?;
    state.features = fw.activation(h, act);
    Ok(state)
}

pub fn build_pool(b: &mut ParamBuilder<'_>, prefix: &str, d_in: usize, d_out: usize, kind: NormKind, tables: usize) -> Result<()> {
    b.linear(&format!("{prefix}.fc"), d_in, d_out, true)?;
    b.norm(&format!("{prefix}.norm"), kind, d_out, tables)
}

/// Coarse grouping of a token sequence: `code >> shift` within each segment.
/// Returns `(parent_map, coarse codes, coarse segments)`.
pub fn coarse_groups(codes: &[u64], segments: &[Range<usize>], shift: u32) -> (Vec<usize>, Vec<u64>, Vec<Range<usize>>) {
    let mut parent = vec![0; codes.len()];
    let mut coarse = Vec::new();
    let mut coarse_segments = Vec::with_capacity(segments.len());
    for r in segments {
        let start = coarse.len();
        for i in r.clone() {
            let c = codes[i] >> shift;
            if coarse.len() == start || *coarse.last().expect("non-empty") != c {
                coarse.push(c);
            }
            parent[i] = coarse.len() - 1;
        }
        coarse_segments.push(start..coarse.len());
    }
    (parent, coarse, coarse_segments)
}

/// Grid pooling by `factor` (a power of two): tokens sharing
/// `code >> 3·log2(factor)` are averaged, then `Linear → Norm`.
/// Records the parent map on `x`.
pub fn pool(
    fw: &mut Forward<'_>,
    x: &mut TokenState,
    prefix: &str,
    factor: usize,
    kind: NormKind,
    segment_table: Option<&[usize]>,
) -> Result<TokenState> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::Config(format!("pool factor must be a power of two >= 2, got {factor}")));
    }
    let shift = 3 * factor.trailing_zeros();
    let (parent, coarse, coarse_segments) = coarse_groups(&x.codes, &x.segments, shift);
    let n = coarse.len();
    let mut members: Vec<Vec<i64>> = vec![Vec::new(); n];
    for (i, &p) in parent.iter().enumerate() {
        members[p].push(x.labels[i]);
    }
    let labels = members.into_iter().map(majority_label).collect();
    let mean = fw.tape.segment_mean(x.features, Arc::new(parent.clone()), n)?;
    let mut out = TokenState {
        features: mean,
        codes: coarse,
        segments: coarse_segments,
        parent_map: None,
        labels,
        tags: x.tags.clone(),
        norm_groups: None,
    };
    out.norm_groups = out.norm_groups_for(segment_table);
    fw.norm_groups = out.norm_groups.clone();
    let h = fw.linear(mean, &format!("{prefix}.fc"))?;
    out.features = fw.norm(h, &format!("{prefix}.norm"), kind)?;
    x.parent_map = Some(parent);
    Ok(out)
}

pub fn build_unpool(b: &mut ParamBuilder<'_>, prefix: &str, d_coarse: usize, d_fine: usize, kind: NormKind, tables: usize) -> Result<()> {
    b.linear(&format!("{prefix}.coarse"), d_coarse, d_fine, true)?;
    b.linear(&format!("{prefix}.skip"), d_fine, d_fine, true)?;
    b.norm(&format!("{prefix}.norm"), kind, d_fine, tables)
}

/// Each fine token gets `Linear(coarse parent) + Linear(skip)`, then
/// `Norm → activation`.
pub fn unpool(
    fw: &mut Forward<'_>,
    coarse: &TokenState,
    skip: &TokenState,
    prefix: &str,
    kind: NormKind,
    act: Activation,
) -> Result<TokenState> {
    let parent = skip
        .parent_map
        .as_ref()
        .ok_or_else(|| Error::Consistency("unpool: skip tokens have no parent map".into()))?;
    if parent.len() != skip.len() {
        return Err(Error::Consistency(format!(
            "unpool: parent map covers {} of {} fine tokens",
            parent.len(),
            skip.len()
        )));
    }
    if let Some((i, p)) = parent.iter().enumerate().find(|(_, &p)| p >= coarse.len()) {
        return Err(Error::Consistency(format!(
            "unpool: fine token {i} maps to coarse token {p} of {}",
            coarse.len()
        )));
    }
    fw.norm_groups = skip.norm_groups.clone();
    let c = fw.linear(coarse.features, &format!("{prefix}.coarse"))?;
    let c = fw.tape.gather_rows(c, parent.clone())?;
    let s = fw.linear(skip.features, &format!("{prefix}.skip"))?;
    let sum = fw.tape.add(c, s)?;
    let h = fw.norm(sum, &format!("{prefix}.norm"), kind)?;
    let mut out = skip.clone();
    out.features = fw.activation(h, act);
    out.parent_map = None;
    Ok(out)
}

#[cfg(test)]
mod tests;
