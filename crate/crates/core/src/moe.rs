//! Mixture-of-experts layer: linear router, top-k sparse softmax gate, expert
//! MLPs, optional always-on shared experts and the load-balancing loss.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Activation, Forward, ParamBuilder};
use crate::tensor::{softmax, softmax_row, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Expert hidden width as a multiple of the model dim.
    pub expert_hidden_multiplier: f64,
    pub num_shared_experts: usize,
    pub activation: Activation,
    pub aux_loss_alpha: f64,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            num_experts: 4,
            top_k: 2,
            expert_hidden_multiplier: 1.0,
            num_shared_experts: 0,
            activation: Activation::Relu,
            aux_loss_alpha: 0.0,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("moe.num_experts must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "moe.top_k must be in [1, {}], got {}",
                self.num_experts, self.top_k
            )));
        }
        if !(self.expert_hidden_multiplier > 0.0) {
            return Err(Error::Config("moe.expert_hidden_multiplier must be > 0".into()));
        }
        if !(self.aux_loss_alpha >= 0.0) {
            return Err(Error::Config("moe.aux_loss_alpha must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hidden(&self, dim: usize) -> usize {
        ((self.expert_hidden_multiplier * dim as f64).round() as usize).max(1)
    }
}

/// One token's routing decision at one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub layer_id: usize,
    pub token_index: usize,
    pub expert_ids: Vec<usize>,
    pub gate_weights: Vec<f64>,
    /// Analytics only; the model never reads it.
    pub dataset_tag: Option<Arc<str>>,
}

/// Destination for routing records of one layer invocation.
pub struct RecordSink<'a> {
    pub records: &'a mut Vec<RoutingRecord>,
    pub layer_id: usize,
    /// Per-token dataset tag; may be empty.
    pub tags: &'a [Option<Arc<str>>],
}

/// Result of routing a `T×D` token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub top_k: usize,
    /// `T×k`, by descending logit (ties → lower expert index).
    pub expert_ids: Vec<usize>,
    /// `T×k` softmax over the selected logits.
    pub gates: Vec<f64>,
    /// `T×N` softmax over all logits.
    pub router_probs: Tensor,
    /// Smallest gap between the k-th and (k+1)-th logit over all tokens
    /// (infinite when `k = N`).
    pub margin: f64,
}

impl Routing {
    pub fn tokens(&self) -> usize {
        self.expert_ids.len() / self.top_k
    }

    pub fn experts_of(&self, t: usize) -> &[usize] {
        &self.expert_ids[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn gates_of(&self, t: usize) -> &[f64] {
        &self.gates[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn top1(&self) -> impl Iterator<Item = usize> + '_ {
        self.expert_ids.iter().step_by(self.top_k).copied()
    }
}

/// Indices of the `k` largest entries, largest first, lower index on ties.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

struct Selection {
    ids: Vec<usize>,
    gates: Vec<f64>,
    margin: f64,
}

fn select(logits: &Tensor, k: usize) -> Selection {
    let n = logits.cols();
    let mut ids = Vec::with_capacity(logits.rows() * k);
    let mut gates = Vec::with_capacity(logits.rows() * k);
    let mut margin = f64::INFINITY;
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let mut sel = top_k_indices(row, n);
        if k < n {
            margin = margin.min(row[sel[k - 1]] - row[sel[k]]);
        }
        sel.truncate(k);
        let mut g: Vec<f64> = sel.iter().map(|&e| row[e]).collect();
        softmax_row(&mut g);
        ids.extend(sel);
        gates.extend(g);
    }
    Selection { ids, gates, margin }
}

/// Routes `x` (`T×D`) with router weights `D×N`: logits `x·router`, top-k by
/// logit, gates by softmax over the selected logits only.
pub fn route(x: &Tensor, router: &Tensor, cfg: &MoEConfig) -> Result<Routing> {
    cfg.validate()?;
    if router.cols() != cfg.num_experts {
        return Err(Error::dim(
            "route",
            format!("router {:?} for {} experts", router.shape(), cfg.num_experts),
        ));
    }
    let logits = x.matmul(router)?;
    let sel = select(&logits, cfg.top_k);
    let router_probs = softmax(&logits, 1)?;
    Ok(Routing {
        top_k: cfg.top_k,
        expert_ids: sel.ids,
        gates: sel.gates,
        router_probs,
        margin: sel.margin,
    })
}

/// Alternative gate: full softmax over all experts, restricted to the selected
/// set and renormalized. Algebraically identical to the selected-logit softmax
/// used by [`route`]; kept to compare the two numerically.
pub fn renormalized_full_gates(routing: &Routing) -> Vec<f64> {
    let mut out = Vec::with_capacity(routing.gates.len());
    for t in 0..routing.tokens() {
        let p = routing.router_probs.row(t);
        let sel = routing.experts_of(t);
        let z: f64 = sel.iter().map(|&e| p[e]).sum();
        out.extend(sel.iter().map(|&e| p[e] / z));
    }
    out
}

/// Switch-style balancing loss `α·N·Σ_i f_i·P_i`, where `f_i` is the share of
/// tokens whose top-1 expert is `i` and `P_i` the mean router probability.
pub fn load_balance_loss(router_probs: &Tensor, top1: &[usize], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let (t, n) = (router_probs.rows(), router_probs.cols());
    let mut f = vec![0.0; n];
    for &e in top1 {
        f[e] += 1.0 / t as f64;
    }
    let mut p = vec![0.0; n];
    for r in 0..t {
        for (pi, v) in p.iter_mut().zip(router_probs.row(r)) {
            *pi += v / t as f64;
        }
    }
    alpha * n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Parameter counts `(total, activated)` of one MoE layer at width `dim`.
/// Activated counts the router, `k` routed experts and the shared experts.
pub fn count_params(cfg: &MoEConfig, dim: usize) -> (usize, usize) {
    let h = cfg.hidden(dim);
    let expert = dim * h + h + h * dim + dim;
    let router = dim * cfg.num_experts;
    let shared = cfg.num_shared_experts * expert;
    (
        router + cfg.num_experts * expert + shared,
        router + cfg.top_k * expert + shared,
    )
}

pub fn expert_name(prefix: &str, e: usize) -> String {
    format!("{prefix}.expert{e}")
}

pub fn shared_name(prefix: &str, s: usize) -> String {
    format!("{prefix}.shared{s}")
}

/// Registers the router and expert tensors of one MoE layer under `prefix`.
pub fn build_params(b: &mut ParamBuilder<'_>, prefix: &str, dim: usize, cfg: &MoEConfig) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden(dim);
    b.matrix(&format!("{prefix}.router"), dim, cfg.num_experts)?;
    for e in 0..cfg.num_experts {
        build_expert(b, &expert_name(prefix, e), dim, h)?;
    }
    for s in 0..cfg.num_shared_experts {
        build_expert(b, &shared_name(prefix, s), dim, h)?;
    }
    Ok(())
}

pub fn build_expert(b: &mut ParamBuilder<'_>, name: &str, dim: usize, hidden: usize) -> Result<()> {
    b.linear(&format!("{name}.fc1"), dim, hidden, true)?;
    b.linear(&format!("{name}.fc2"), hidden, dim, true)
}

/// Linear → activation → Linear.
pub fn expert_forward(fw: &mut Forward<'_>, x: Var, name: &str, act: Activation) -> Result<Var> {
    let h = fw.linear(x, &format!("{name}.fc1"))?;
    let h = fw.activation(h, act);
    fw.linear(h, &format!("{name}.fc2"))
}

/// Output of [`moe_forward`].
pub struct MoEOutput {
    pub out: Var,
    /// Balancing loss on the tape, present only when `α > 0`.
    pub aux_loss: Option<Var>,
    pub routing: Routing,
}

/// `Σ_{i∈S_x} G_i(x)·f_i(x) + Σ_s f_s(x)` per token. Each routed expert only
/// sees the rows routed to it; experts that receive no token are never read.
pub fn moe_forward(
    fw: &mut Forward<'_>,
    x: Var,
    prefix: &str,
    cfg: &MoEConfig,
    sink: Option<RecordSink<'_>>,
) -> Result<MoEOutput> {
    cfg.validate()?;
    let (t, _) = fw.tape.value(x).expect_matrix("moe_forward")?;
    let n = cfg.num_experts;
    let k = cfg.top_k;
    let router = fw.param(&format!("{prefix}.router"))?;
    let logits = fw.tape.matmul(x, router)?;
    let Selection {
        ids: expert_ids,
        gates: gate_values,
        margin,
    } = select(fw.tape.value(logits), k);

    let flat: Vec<usize> = (0..t * k).map(|j| (j / k) * n + expert_ids[j]).collect();
    let selected = fw.tape.take(logits, flat, vec![t, k])?;
    let gates = fw.tape.softmax(selected, 1)?;

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); n];
    for tok in 0..t {
        for r in 0..k {
            let e = expert_ids[tok * k + r];
            rows[e].push(tok);
            slots[e].push(tok * k + r);
        }
    }

    let mut out: Option<Var> = None;
    for e in 0..n {
        if rows[e].is_empty() {
            continue;
        }
        let xe = fw.tape.gather_rows(x, rows[e].clone())?;
        let ye = expert_forward(fw, xe, &expert_name(prefix, e), cfg.activation)?;
        let ge = fw.tape.take(gates, std::mem::take(&mut slots[e]), vec![rows[e].len()])?;
        let scaled = fw.tape.row_scale(ye, ge)?;
        let contrib = fw.tape.scatter_rows(scaled, std::mem::take(&mut rows[e]), t)?;
        out = Some(match out {
            Some(acc) => fw.tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    for s in 0..cfg.num_shared_experts {
        let ys = expert_forward(fw, x, &shared_name(prefix, s), cfg.activation)?;
        out = Some(match out {
            Some(acc) => fw.tape.add(acc, ys)?,
            None => ys,
        });
    }
    let out = out.ok_or_else(|| Error::Input("moe_forward on zero tokens".into()))?;

    let router_probs = softmax(fw.tape.value(logits), 1)?;
    let aux_loss = if cfg.aux_loss_alpha > 0.0 {
        let probs = fw.tape.softmax(logits, 1)?;
        let mut f = vec![0.0; n];
        for tok in 0..t {
            f[expert_ids[tok * k]] += 1.0;
        }
        let scale = cfg.aux_loss_alpha * n as f64 / (t as f64 * t as f64);
        let weights: Vec<f64> = (0..t * n).map(|j| f[j % n] * scale).collect();
        let w = fw.tape.constant(Tensor::new(vec![t, n], weights)?);
        let prod = fw.tape.mul(probs, w)?;
        Some(fw.tape.sum(prod))
    } else {
        None
    };

    let routing = Routing {
        top_k: k,
        expert_ids,
        gates: gate_values,
        router_probs,
        margin,
    };
    if let Some(sink) = sink {
        for tok in 0..t {
            sink.records.push(RoutingRecord {
                layer_id: sink.layer_id,
                token_index: tok,
                expert_ids: routing.experts_of(tok).to_vec(),
                gate_weights: routing.gates_of(tok).to_vec(),
                dataset_tag: sink.tags.get(tok).cloned().flatten(),
            });
        }
    }
    Ok(MoEOutput {
        out,
        aux_loss,
        routing,
    })
}

/// Formats a gate with 6 significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

pub const ROUTING_CSV_HEADER: &str = "step,layer_id,token_index,rank,expert_id,gate,dataset_tag";

/// Appends records as CSV rows (one per token and selected expert).
pub fn write_routing_csv<W: Write>(w: &mut W, step: usize, records: &[RoutingRecord]) -> std::io::Result<()> {
    for r in records {
        for (rank, (e, g)) in r.expert_ids.iter().zip(&r.gate_weights).enumerate() {
            writeln!(
                w,
                "{step},{},{},{rank},{e},{},{}",
                r.layer_id,
                r.token_index,
                format_sig6(*g),
                r.dataset_tag.as_deref().unwrap_or("")
            )?;
        }
    }
    Ok(())
}

/// One parsed routing CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRow {
    pub step: usize,
    pub layer_id: usize,
    pub token_index: usize,
    pub rank: usize,
    pub expert_id: usize,
    pub gate: f64,
    pub dataset_tag: Option<String>,
}

pub fn parse_routing_csv(text: &str) -> Result<Vec<RoutingRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == ROUTING_CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "routing log header must be {ROUTING_CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(7, ',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("routing log line {}: expected 7 fields", ln + 2)));
        }
        let num = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("routing log line {}: bad integer {s:?}", ln + 2)))
        };
        rows.push(RoutingRow {
            step: num(f[0])?,
            layer_id: num(f[1])?,
            token_index: num(f[2])?,
            rank: num(f[3])?,
            expert_id: num(f[4])?,
            gate: f[5]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("routing log line {}: bad gate", ln + 2)))?,
            dataset_tag: Some(f[6].trim()).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    Ok(rows)
}
