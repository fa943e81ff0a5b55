//! Routing analytics: dataset-conditional expert distributions, weighted
//! Jensen-Shannon divergence, top-1 token pathways, expert-class
//! co-occurrence and feature export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::blocks::{LayerInfo, Model, RoutingLog, StageKind};
use crate::error::{Error, Result};
use crate::langhead::predict;
use crate::moe::{format_sig6, write_routing_csv, RoutingRecord, RoutingRow, ROUTING_CSV_HEADER};
use crate::syndata::{fragments, Fragment, PointCloud};
use crate::tensor::Tensor;
use crate::train::infer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistributionKind {
    /// Fraction of tokens whose rank-0 expert is `e`.
    Top1,
    /// Mean gate weight on `e`.
    GateWeighted,
}

/// Expert distribution of one layer, per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertDistribution {
    pub layer_id: usize,
    /// Sorted dataset names.
    pub datasets: Vec<String>,
    /// `probs[i][e]` = P_i(e).
    pub probs: Vec<Vec<f64>>,
    /// Token share of each dataset at this layer.
    pub weights: Vec<f64>,
    pub tokens: Vec<u64>,
}

/// Per-layer distributions, layers in ascending id order.
pub fn collect_distributions(records: &[RoutingRecord], num_experts: usize, kind: DistributionKind) -> Result<Vec<ExpertDistribution>> {
    let mut acc: BTreeMap<usize, BTreeMap<String, (u64, Vec<f64>)>> = BTreeMap::new();
    for r in records {
        let tag = r.dataset_tag.as_deref().ok_or_else(|| {
            Error::Analytics(format!("record of layer {} token {} has no dataset tag", r.layer_id, r.token_index))
        })?;
        if r.expert_ids.is_empty() || r.expert_ids.len() != r.gate_weights.len() {
            return Err(Error::Analytics(format!("malformed record at layer {}", r.layer_id)));
        }
        if let Some(&e) = r.expert_ids.iter().find(|&&e| e >= num_experts) {
            return Err(Error::Analytics(format!("expert id {e} outside {num_experts} experts")));
        }
        let (n, mass) = acc
            .entry(r.layer_id)
            .or_default()
            .entry(tag.to_string())
            .or_insert_with(|| (0, vec![0.0; num_experts]));
        *n += 1;
        match kind {
            DistributionKind::Top1 => mass[r.expert_ids[0]] += 1.0,
            DistributionKind::GateWeighted => {
                for (&e, &g) in r.expert_ids.iter().zip(&r.gate_weights) {
                    mass[e] += g;
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(layer_id, per)| {
            let total: u64 = per.values().map(|(n, _)| n).sum();
            let mut d = ExpertDistribution {
                layer_id,
                datasets: Vec::new(),
                probs: Vec::new(),
                weights: Vec::new(),
                tokens: Vec::new(),
            };
            for (name, (n, mass)) in per {
                let s: f64 = mass.iter().sum();
                d.probs.push(mass.iter().map(|m| m / s).collect());
                d.weights.push(n as f64 / total as f64);
                d.tokens.push(n);
                d.datasets.push(name);
            }
            d
        })
        .collect())
}

/// Entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Weighted Jensen-Shannon divergence `H(Σ π_i P_i) − Σ π_i H(P_i)` in nats.
pub fn jsd(probs: &[Vec<f64>], weights: &[f64]) -> f64 {
    let e = probs.first().map_or(0, |p| p.len());
    let mix: Vec<f64> = (0..e)
        .map(|j| probs.iter().zip(weights).map(|(p, w)| w * p[j]).sum())
        .collect();
    let v = entropy(&mix) - probs.iter().zip(weights).map(|(p, w)| w * entropy(p)).sum::<f64>();
    v.max(0.0)
}

impl ExpertDistribution {
    pub fn jsd(&self) -> f64 {
        jsd(&self.probs, &self.weights)
    }
}

/// One line of the JSD report.
#[derive(Clone, Debug, PartialEq)]
pub struct JsdRow {
    pub layer_id: usize,
    pub stage: StageKind,
    pub jsd_nats: f64,
}

pub fn jsd_report(dists: &[ExpertDistribution], log_layers: &[LayerInfo]) -> Result<Vec<JsdRow>> {
    dists
        .iter()
        .map(|d| {
            let info = log_layers
                .iter()
                .find(|l| l.layer_id == d.layer_id)
                .ok_or_else(|| Error::Analytics(format!("unknown layer {}", d.layer_id)))?;
            Ok(JsdRow {
                layer_id: d.layer_id,
                stage: info.stage,
                jsd_nats: d.jsd(),
            })
        })
        .collect()
}

/// Mean JSD of the encoder and decoder layers.
pub fn stage_means(rows: &[JsdRow]) -> (Option<f64>, Option<f64>) {
    let mean = |k: StageKind| {
        let v: Vec<f64> = rows.iter().filter(|r| r.stage == k).map(|r| r.jsd_nats).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(StageKind::Encoder), mean(StageKind::Decoder))
}

pub fn write_jsd_csv<W: Write>(w: &mut W, rows: &[JsdRow]) -> std::io::Result<()> {
    writeln!(w, "layer_id,stage,jsd_nats")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.layer_id, r.stage, format_sig6(r.jsd_nats))?;
    }
    Ok(())
}

/// A routing log restricted to the finest-level tokens it is responsible
/// for, with optional per-token predictions.
#[derive(Clone, Debug)]
pub struct TrackedLog {
    pub log: RoutingLog,
    /// Tracked finest-level token indices, ascending.
    pub tokens: Vec<usize>,
    pub predictions: Option<Vec<usize>>,
}

impl TrackedLog {
    pub fn full(log: RoutingLog) -> Self {
        let n = log.level_sizes.first().copied().unwrap_or(0);
        TrackedLog {
            log,
            tokens: (0..n).collect(),
            predictions: None,
        }
    }

    /// Ancestor of finest token `t` at `level`.
    fn ancestor(&self, mut t: usize, level: usize) -> Result<usize> {
        for l in 0..level {
            t = *self
                .log
                .parent_maps
                .get(l)
                .and_then(|m| m.get(t))
                .ok_or_else(|| Error::Analytics(format!("no lineage for token {t} at level {l}")))?;
        }
        Ok(t)
    }

    /// Records of the tracked tokens and their ancestors.
    pub fn records(&self) -> Result<Vec<RoutingRecord>> {
        let mut keep: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.log.level_sizes.len().max(1)];
        for &t in &self.tokens {
            for (level, set) in keep.iter_mut().enumerate() {
                set.insert(self.ancestor(t, level)?);
            }
        }
        let level_of: HashMap<usize, usize> = self.log.layers.iter().map(|l| (l.layer_id, l.level)).collect();
        let mut out = Vec::new();
        for r in &self.log.records {
            let level = *level_of
                .get(&r.layer_id)
                .ok_or_else(|| Error::Analytics(format!("record of unknown layer {}", r.layer_id)))?;
            if keep.get(level).is_some_and(|s| s.contains(&r.token_index)) {
                out.push(r.clone());
            }
        }
        Ok(out)
    }

    /// Top-1 expert at every layer (ascending id) and dataset tag for each
    /// tracked token.
    fn lineage(&self) -> Result<(Vec<usize>, Vec<(Vec<usize>, String)>)> {
        let mut layers: Vec<_> = self.log.layers.iter().collect();
        layers.sort_by_key(|l| l.layer_id);
        let mut top1: HashMap<(usize, usize), (usize, Option<&str>)> = HashMap::new();
        for r in &self.log.records {
            if let Some(&e) = r.expert_ids.first() {
                top1.insert((r.layer_id, r.token_index), (e, r.dataset_tag.as_deref()));
            }
        }
        let mut rows = Vec::with_capacity(self.tokens.len());
        for &t in &self.tokens {
            let mut path = Vec::with_capacity(layers.len());
            let mut tag = None;
            for l in &layers {
                let a = self.ancestor(t, l.level)?;
                let &(e, tg) = top1.get(&(l.layer_id, a)).ok_or_else(|| {
                    Error::Analytics(format!("incomplete lineage: token {t} has no record at layer {}", l.layer_id))
                })?;
                path.push(e);
                tag = tag.or(tg);
            }
            let tag = tag.ok_or_else(|| Error::Analytics(format!("token {t} has no dataset tag")))?;
            rows.push((path, tag.to_string()));
        }
        Ok((layers.iter().map(|l| l.layer_id).collect(), rows))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathwayRow {
    pub path: Vec<usize>,
    pub count: u64,
    /// Aligned with `PathwayTable::datasets`.
    pub per_dataset: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathwayTable {
    pub layer_ids: Vec<usize>,
    pub datasets: Vec<String>,
    /// Count descending, ties by path ascending.
    pub rows: Vec<PathwayRow>,
    /// Tracked tokens per dataset (before truncation to `top_m`).
    pub tracked: Vec<u64>,
    pub distinct: usize,
}

pub fn pathways(logs: &[TrackedLog], top_m: usize) -> Result<PathwayTable> {
    let mut layer_ids: Option<Vec<usize>> = None;
    let mut counts: HashMap<Vec<usize>, BTreeMap<String, u64>> = HashMap::new();
    let mut datasets = BTreeSet::new();
    for tl in logs {
        let (ids, rows) = tl.lineage()?;
        match &layer_ids {
            None => layer_ids = Some(ids),
            Some(prev) if *prev != ids => {
                return Err(Error::Analytics("logs cover different MoE layers".into()));
            }
            _ => {}
        }
        for (path, tag) in rows {
            datasets.insert(tag.clone());
            *counts.entry(path).or_default().entry(tag).or_default() += 1;
        }
    }
    let datasets: Vec<String> = datasets.into_iter().collect();
    let mut rows: Vec<PathwayRow> = counts
        .into_iter()
        .map(|(path, per)| {
            let per_dataset: Vec<u64> = datasets.iter().map(|d| per.get(d).copied().unwrap_or(0)).collect();
            PathwayRow {
                count: per_dataset.iter().sum(),
                path,
                per_dataset,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.path.cmp(&b.path)));
    let tracked = (0..datasets.len()).map(|i| rows.iter().map(|r| r.per_dataset[i]).sum()).collect();
    let distinct = rows.len();
    rows.truncate(top_m);
    Ok(PathwayTable {
        layer_ids: layer_ids.unwrap_or_default(),
        datasets,
        rows,
        tracked,
        distinct,
    })
}

pub fn path_string(path: &[usize]) -> String {
    path.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("-")
}

pub fn write_pathway_csv<W: Write>(w: &mut W, t: &PathwayTable) -> std::io::Result<()> {
    write!(w, "rank,path,count")?;
    for d in &t.datasets {
        write!(w, ",{d}")?;
    }
    writeln!(w)?;
    for (i, r) in t.rows.iter().enumerate() {
        write!(w, "{},{},{}", i + 1, path_string(&r.path), r.count)?;
        for c in &r.per_dataset {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `(top-1 expert, predicted class)` counts of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertClassMatrix {
    pub layer_id: usize,
    /// `counts[e][c]`.
    pub counts: Vec<Vec<u64>>,
}

impl ExpertClassMatrix {
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }
}

/// Co-occurrence of each tracked token's top-1 expert (inherited from its
/// ancestor at coarse layers) with its predicted class.
pub fn expert_class_matrix(logs: &[TrackedLog], num_experts: usize, num_classes: usize) -> Result<Vec<ExpertClassMatrix>> {
    let mut out: BTreeMap<usize, Vec<Vec<u64>>> = BTreeMap::new();
    for tl in logs {
        let preds = tl
            .predictions
            .as_ref()
            .ok_or_else(|| Error::Analytics("log has no predictions".into()))?;
        if preds.len() != tl.tokens.len() {
            return Err(Error::Analytics(format!(
                "{} predictions for {} tracked tokens",
                preds.len(),
                tl.tokens.len()
            )));
        }
        let (ids, rows) = tl.lineage()?;
        for ((path, _), &c) in rows.iter().zip(preds) {
            if c >= num_classes {
                return Err(Error::Analytics(format!("class {c} outside {num_classes} classes")));
            }
            for (&layer, &e) in ids.iter().zip(path) {
                if e >= num_experts {
                    return Err(Error::Analytics(format!("expert id {e} outside {num_experts} experts")));
                }
                out.entry(layer).or_insert_with(|| vec![vec![0; num_classes]; num_experts])[e][c] += 1;
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|(layer_id, counts)| ExpertClassMatrix { layer_id, counts })
        .collect())
}

fn scene_fragments(model: &Model, cloud: &PointCloud, fragment_voxels: usize) -> Result<Vec<Fragment>> {
    if fragment_voxels == 0 {
        let all: Vec<usize> = (0..cloud.len()).collect();
        Ok(vec![Fragment { owned: all.clone(), points: all }])
    } else {
        fragments(cloud, model.config.voxel.cell_size, fragment_voxels)
    }
}

/// Finest-level tokens covering the owned points of a fragment.
fn owned_tokens(point_token: &[usize], owned: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = owned.iter().map(|&o| point_token[o]).collect();
    set.into_iter().collect()
}

/// Runs every scene (in fragments when `fragment_voxels > 0`) and returns
/// one tracked log per fragment. Predictions are filled when a class matrix
/// is given.
pub fn route_scenes(
    model: &Model,
    scenes: &[PointCloud],
    norm_tables: Option<&[usize]>,
    fragment_voxels: usize,
    class_matrix: Option<(&Tensor, f64)>,
) -> Result<Vec<TrackedLog>> {
    let mut out = Vec::new();
    for (i, cloud) in scenes.iter().enumerate() {
        for f in scene_fragments(model, cloud, fragment_voxels)? {
            let sub = cloud.subset(&f.points);
            let so = infer(model, &sub, norm_tables.map(|t| t[i]), true)?;
            let tokens = owned_tokens(&so.batch.point_token[0], &f.owned);
            let predictions = match class_matrix {
                Some((m, scale)) => {
                    let p = predict(&so.features, m, scale)?;
                    Some(tokens.iter().map(|&t| p[t]).collect())
                }
                None => None,
            };
            out.push(TrackedLog {
                log: so.log.expect("recording was requested"),
                tokens,
                predictions,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStage {
    EncoderOut,
    DecoderOut,
}

impl std::str::FromStr for FeatureStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_out" => Ok(FeatureStage::EncoderOut),
            "decoder_out" => Ok(FeatureStage::DecoderOut),
            other => Err(Error::Config(format!("unknown feature stage {other:?} (expected encoder_out or decoder_out)"))),
        }
    }
}

/// Feature rows: dataset tag and feature vector per token. Decoder rows are
/// the tokens owned by each fragment; encoder rows are the deepest-level
/// ancestors of those tokens.
pub fn export_features(
    model: &Model,
    scenes: &[PointCloud],
    stage: FeatureStage,
    norm_tables: Option<&[usize]>,
    fragment_voxels: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (i, cloud) in scenes.iter().enumerate() {
        let tag = cloud.dataset_tag.as_deref().unwrap_or("none").to_string();
        for f in scene_fragments(model, cloud, fragment_voxels)? {
            let sub = cloud.subset(&f.points);
            let so = infer(model, &sub, norm_tables.map(|t| t[i]), true)?;
            let tokens = owned_tokens(&so.batch.point_token[0], &f.owned);
            let (feat, idx): (&Tensor, Vec<usize>) = match stage {
                FeatureStage::DecoderOut => (&so.decoder_out, tokens),
                FeatureStage::EncoderOut => {
                    let tl = TrackedLog {
                        tokens: tokens.clone(),
                        log: so.log.clone().expect("recording was requested"),
                        predictions: None,
                    };
                    let deepest = tl.log.level_sizes.len().saturating_sub(1);
                    let set: BTreeSet<usize> = tokens.iter().map(|&t| tl.ancestor(t, deepest)).collect::<Result<_>>()?;
                    (&so.encoder_out, set.into_iter().collect())
                }
            };
            for t in idx {
                rows.push((tag.clone(), feat.row(t).to_vec()));
            }
        }
    }
    Ok(rows)
}

/// Line 1 `K D`, then `tag f1 .. fD` per row.
pub fn write_features(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut s = format!("{} {d}\n", rows.len());
    for (tag, v) in rows {
        s.push_str(tag);
        for x in v {
            s.push_str(&format!(" {x:?}"));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes the routing CSV (the `step` column numbers the logs) and the
/// lineage sidecar needed for pathways and co-occurrence.
pub fn write_routing_log(csv: &Path, lineage: &Path, logs: &[TrackedLog], classes: &[String]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{ROUTING_CSV_HEADER}").expect("vec write");
    for (i, tl) in logs.iter().enumerate() {
        write_routing_csv(&mut out, i, &tl.records()?).expect("vec write");
    }
    std::fs::write(csv, out).map_err(|e| Error::io(csv, e))?;
    std::fs::write(lineage, lineage_text(logs, classes)).map_err(|e| Error::io(lineage, e))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Sidecar text: layer table, class names of the predictions, then per log
/// its level sizes, parent maps, tracked tokens and predictions.
pub fn lineage_text(logs: &[TrackedLog], classes: &[String]) -> String {
    let mut s = String::from("lineage 1\n");
    if !classes.is_empty() {
        s.push_str(&format!("classes\t{}\n", classes.join("\t")));
    }
    let layers = logs.first().map(|l| l.log.layers.clone()).unwrap_or_default();
    s.push_str(&format!("layers {}\n", layers.len()));
    for l in &layers {
        s.push_str(&format!("layer {} {} {}\n", l.layer_id, l.stage, l.level));
    }
    for (i, tl) in logs.iter().enumerate() {
        s.push_str(&format!("log {i} sizes {}\n", join(&tl.log.level_sizes)));
        for (l, m) in tl.log.parent_maps.iter().enumerate() {
            s.push_str(&format!("parent {l} {}\n", join(m)));
        }
        s.push_str(&format!("tracked {}\n", join(&tl.tokens)));
        match &tl.predictions {
            Some(p) => s.push_str(&format!("pred {}\n", join(p))),
            None => s.push_str("pred -\n"),
        }
    }
    s
}

/// Groups routing CSV rows into records per log, ranks in order.
pub fn records_from_rows(rows: &[RoutingRow]) -> Result<BTreeMap<usize, Vec<RoutingRecord>>> {
    let mut grouped: BTreeMap<(usize, usize, usize), Vec<&RoutingRow>> = BTreeMap::new();
    for r in rows {
        grouped.entry((r.step, r.layer_id, r.token_index)).or_default().push(r);
    }
    let mut out: BTreeMap<usize, Vec<RoutingRecord>> = BTreeMap::new();
    for ((step, layer_id, token_index), mut rs) in grouped {
        rs.sort_by_key(|r| r.rank);
        if rs.iter().enumerate().any(|(i, r)| r.rank != i) {
            return Err(Error::Analytics(format!(
                "log {step} layer {layer_id} token {token_index}: ranks are not 0..k"
            )));
        }
        out.entry(step).or_default().push(RoutingRecord {
            layer_id,
            token_index,
            expert_ids: rs.iter().map(|r| r.expert_id).collect(),
            gate_weights: rs.iter().map(|r| r.gate).collect(),
            dataset_tag: rs[0].dataset_tag.as_deref().map(Arc::from),
        });
    }
    Ok(out)
}

fn nums(tokens: &[&str], what: &str) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("lineage {what}: bad integer {t:?}"))))
        .collect()
}

/// Rebuilds tracked logs and prediction class names from routing CSV rows
/// and a lineage sidecar.
pub fn parse_lineage(text: &str, rows: &[RoutingRow]) -> Result<(Vec<TrackedLog>, Vec<String>)> {
    let mut records = records_from_rows(rows)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("lineage 1") {
        return Err(Error::Format("lineage file must start with `lineage 1`".into()));
    }
    let mut layers = Vec::new();
    let mut classes = Vec::new();
    let mut logs: Vec<TrackedLog> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("classes\t") {
            classes = rest.split('\t').map(str::to_string).collect();
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match f[0] {
            "layers" => {}
            "layer" if f.len() == 4 => {
                let n = nums(&[f[1], f[3]], "layer")?;
                layers.push(LayerInfo {
                    layer_id: n[0],
                    stage: f[2].parse()?,
                    level: n[1],
                    dim: 0,
                    name: format!("layer{}", n[0]),
                });
            }
            "log" if f.len() >= 3 && f[2] == "sizes" => {
                let id = nums(&f[1..2], "log")?[0];
                if id != logs.len() {
                    return Err(Error::Format(format!("lineage logs out of order at {id}")));
                }
                logs.push(TrackedLog {
                    log: RoutingLog {
                        records: records.remove(&id).unwrap_or_default(),
                        layers: layers.clone(),
                        parent_maps: Vec::new(),
                        level_sizes: nums(&f[3..], "sizes")?,
                    },
                    tokens: Vec::new(),
                    predictions: None,
                });
            }
            "parent" | "tracked" | "pred" => {
                let tl = logs
                    .last_mut()
                    .ok_or_else(|| Error::Format(format!("lineage `{}` before any log", f[0])))?;
                match f[0] {
                    "parent" => {
                        let level = nums(&f[1..2.min(f.len())], "parent")?;
                        if level.first() != Some(&tl.log.parent_maps.len()) {
                            return Err(Error::Format("lineage parent maps out of order".into()));
                        }
                        tl.log.parent_maps.push(nums(&f[2..], "parent")?);
                    }
                    "tracked" => tl.tokens = nums(&f[1..], "tracked")?,
                    _ => {
                        if f.get(1) != Some(&"-") {
                            tl.predictions = Some(nums(&f[1..], "pred")?);
                        }
                    }
                }
            }
            _ => return Err(Error::Format(format!("unrecognized lineage line {line:?}"))),
        }
    }
    if let Some(id) = records.keys().next() {
        return Err(Error::Analytics(format!("routing log {id} has no lineage entry")));
    }
    Ok((logs, classes))
}
