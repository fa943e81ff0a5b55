//! Built-in verification suite behind `pmoe selfcheck`: finite-difference
//! gradients, mixture and routing oracles, curve-code oracles, analytics
//! reference values and parameter accounting.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytics::{entropy, jsd};
use crate::blocks::{network_forward, voxelize_batch, Model, NetworkConfig, StageConfig};
use crate::error::{Error, Result};
use crate::moe::{build_params, count_params, expert_forward, moe_forward, MoEConfig};
use crate::nn::{Activation, BufferStore, Forward, ParamBuilder, ParamStore};
use crate::serialization::morton_encode;
use crate::syndata::PointCloud;
use crate::tensor::{NormKind, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn fail(msg: impl Into<String>) -> Error {
    Error::Consistency(msg.into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(fail(msg()))
    }
}

/// Sets gains to U(0.5, 1.5) and everything else to U(−0.5, 0.5).
pub fn randomize_params(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..params.len() {
        let is_gain = params.at(i).0.ends_with(".gain");
        for v in params.at_mut(i).data_mut() {
            *v = if is_gain {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-0.5..0.5)
            };
        }
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
    PointCloud {
        coords: (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..extent)))
            .collect(),
        feats: (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        num_feats: 3,
        labels: vec![0; n],
        dataset_tag: None,
    }
}

/// The two-block gradient-check network: one stage of two blocks, D = 8,
/// N = 2 experts, k = 1, layer norm, SiLU experts, α = 0.01.
pub fn gradcheck_network() -> NetworkConfig {
    let mut cfg = NetworkConfig::tiny();
    cfg.encoder = vec![StageConfig {
        num_blocks: 2,
        dim: 8,
        window_size: 4,
    }];
    cfg.decoder = Vec::new();
    cfg.pool_factors = Vec::new();
    cfg.embed_dim = 8;
    cfg.head_embed_dim = 4;
    cfg.num_heads = 2;
    cfg.norm_kind = NormKind::Layer;
    cfg.moe.num_experts = 2;
    cfg.moe.top_k = 1;
    cfg.moe.activation = Activation::Silu;
    cfg.moe.aux_loss_alpha = 0.01;
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub entries: usize,
    /// Smallest router top-k margin over the base and all perturbed passes.
    pub min_margin: f64,
}

/// Central differences (`h`) against the tape on every parameter entry of
/// the gradient-check network; relative error floored at 1e-5.
pub fn network_gradient_check(seed: u64, h: f64) -> Result<GradientReport> {
    let mut model = Model::new(gradcheck_network(), seed)?;
    randomize_params(&mut model.params, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let c = random_cloud(&mut rng, 12, 1.0);
    let batch = voxelize_batch(&[&c], &model.config.voxel)?;
    let target = Tensor::new(
        vec![batch.len(), 4],
        (0..batch.len() * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let loss_of = |params: &ParamStore, grad: bool| -> Result<(f64, f64, Option<Vec<Tensor>>)> {
        let mut buffers = model.buffers.clone();
        let mut fw = Forward::new(params, &mut buffers, true);
        let out = network_forward(&mut fw, &model.config, &batch, None, None)?;
        let t = fw.tape.constant(target.clone());
        let prod = fw.tape.mul(out.features, t)?;
        let mut loss = fw.tape.sum(prod);
        if let Some(a) = out.aux_loss {
            loss = fw.tape.add(loss, a)?;
        }
        let value = fw.tape.value(loss).item();
        let grads = if grad { Some(fw.backward(loss)?) } else { None };
        Ok((value, out.margin, grads))
    };
    let (_, mut min_margin, grads) = loss_of(&model.params, true)?;
    let grads = grads.expect("requested");
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut p = model.params.clone();
    for i in 0..p.len() {
        for j in 0..p.at(i).1.numel() {
            let orig = p.at(i).1.data()[j];
            p.at_mut(i).data_mut()[j] = orig + h;
            let (lp, mp, _) = loss_of(&p, false)?;
            p.at_mut(i).data_mut()[j] = orig - h;
            let (lm, mm, _) = loss_of(&p, false)?;
            p.at_mut(i).data_mut()[j] = orig;
            min_margin = min_margin.min(mp).min(mm);
            let num = (lp - lm) / (2.0 * h);
            let ana = grads[i].data()[j];
            worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-5));
            entries += 1;
        }
    }
    Ok(GradientReport {
        max_rel_error: worst,
        entries,
        min_margin,
    })
}

fn moe_layer(dim: usize, cfg: &MoEConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut b = ParamBuilder {
        store: &mut store,
        buffers: &mut buffers,
        seed,
    };
    build_params(&mut b, "moe", dim, cfg)?;
    Ok(store)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn run_moe(store: &ParamStore, x: &Tensor, cfg: &MoEConfig, training: bool) -> Result<(Tensor, Vec<usize>, Vec<f64>, Vec<Tensor>)> {
    let mut buffers = BufferStore::new();
    let mut fw = Forward::new(store, &mut buffers, training);
    let xv = fw.tape.constant(x.clone());
    let out = moe_forward(&mut fw, xv, "moe", cfg, None)?;
    let y = fw.tape.value(out.out).clone();
    let (ids, gates) = (out.routing.expert_ids.clone(), out.routing.gates.clone());
    let loss = fw.tape.sum(out.out);
    let grads = if training { fw.backward(loss)? } else { Vec::new() };
    Ok((y, ids, gates, grads))
}

/// Row-by-row softmax mixture of every expert.
fn dense_mixture(store: &ParamStore, x: &Tensor, n: usize) -> Vec<f64> {
    let router = store.get("moe.router").expect("built");
    let d = x.cols();
    let mut out = vec![0.0; x.numel()];
    for t in 0..x.rows() {
        let xr = x.row(t);
        let logits: Vec<f64> = (0..n).map(|e| (0..d).map(|i| xr[i] * router.get(i, e)).sum()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (e, l) in logits.iter().enumerate() {
            let w = (l - m).exp() / z;
            let p = |s: &str| store.get(&format!("moe.expert{e}.{s}")).expect("built");
            let (w1, b1, w2, b2) = (p("fc1.w"), p("fc1.b"), p("fc2.w"), p("fc2.b"));
            let h: Vec<f64> = (0..w1.cols())
                .map(|j| ((0..d).map(|i| xr[i] * w1.get(i, j)).sum::<f64>() + b1.data()[j]).max(0.0))
                .collect();
            for o in 0..d {
                let y = (0..h.len()).map(|j| h[j] * w2.get(j, o)).sum::<f64>() + b2.data()[o];
                out[t * d + o] += w * y;
            }
        }
    }
    out
}

pub fn check_mixture_equivalence() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for n in 2..=4 {
        let cfg = MoEConfig {
            num_experts: n,
            top_k: n,
            ..MoEConfig::default()
        };
        let store = moe_layer(6, &cfg, 12 + n as u64)?;
        let x = random_matrix(&mut rng, 15, 6);
        let (y, ..) = run_moe(&store, &x, &cfg, false)?;
        for (a, b) in y.data().iter().zip(dense_mixture(&store, &x, n)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("k = N deviates from the dense mixture by {worst:e}"))?;
    let one = MoEConfig {
        num_experts: 1,
        top_k: 1,
        ..MoEConfig::default()
    };
    let store = moe_layer(6, &one, 21)?;
    let x = random_matrix(&mut rng, 9, 6);
    let (y, ..) = run_moe(&store, &x, &one, false)?;
    let mut buffers = BufferStore::new();
    let mut fw = Forward::new(&store, &mut buffers, false);
    let xv = fw.tape.constant(x);
    let direct = expert_forward(&mut fw, xv, "moe.expert0", one.activation)?;
    ensure(fw.tape.value(direct).data() == y.data(), || "N = 1 differs from the expert".into())?;
    Ok(format!("max |k=N - dense| = {worst:.2e}; N=1 bitwise"))
}

pub fn check_conditional_computation() -> Result<String> {
    let cfg = MoEConfig {
        num_experts: 4,
        top_k: 2,
        ..MoEConfig::default()
    };
    let mut store = moe_layer(5, &cfg, 31)?;
    {
        let router = store.get_mut("moe.router").expect("built");
        for i in 0..5 {
            router.data_mut()[i * 4 + 3] = -1e3;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = Tensor::new(vec![20, 5], (0..100).map(|_| rng.gen_range(0.1..1.0)).collect())?;
    let (y, ids, gates, grads) = run_moe(&store, &x, &cfg, true)?;
    ensure(ids.iter().all(|&e| e != 3), || "expert 3 was selected".into())?;
    for (i, (name, _)) in store.iter().enumerate() {
        if name.starts_with("moe.expert3") {
            ensure(grads[i].data().iter().all(|&g| g == 0.0), || format!("{name} has nonzero gradient"))?;
        }
    }
    for t in 0..20 {
        let g = &gates[t * 2..t * 2 + 2];
        let s: f64 = g.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9 && g.iter().all(|&v| v > 0.0), || format!("token {t} gates {g:?}"))?;
    }
    let mut perturbed = store.clone();
    for suffix in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
        let t = perturbed.get_mut(&format!("moe.expert3.{suffix}")).expect("built");
        t.data_mut().iter_mut().for_each(|v| *v += 1e3);
    }
    let (y2, ..) = run_moe(&perturbed, &x, &cfg, false)?;
    ensure(y.data() == y2.data(), || "perturbing an unselected expert changed the output".into())?;
    Ok("unselected experts unread, zero gradient, gates k-sparse and normalized".into())
}

fn interleave(v: [u32; 3], bits: u32) -> u64 {
    let mut code = 0u64;
    for b in 0..bits {
        for (a, &x) in v.iter().enumerate() {
            code |= ((x as u64 >> b) & 1) << (3 * b + a as u32);
        }
    }
    code
}

pub fn check_morton() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10_000 {
        let bits = rng.gen_range(1..=21);
        let v = [0, 1, 2].map(|_| rng.gen_range(0..(1u32 << bits)));
        let code = morton_encode(v, bits)?;
        ensure(code == interleave(v, bits), || format!("{v:?} at {bits} bits"))?;
    }
    let mut seen = HashSet::new();
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..8 {
                seen.insert(morton_encode([x, y, z], 3)?);
            }
        }
    }
    ensure(seen.len() == 512, || format!("{} distinct codes of 512", seen.len()))?;
    Ok("10000 random triples match; 512/512 distinct at 3 bits".into())
}

pub fn check_permutation_invariance() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let n = 400;
    let a = random_cloud(&mut rng, n, 2.0);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let b = PointCloud {
        coords: perm.iter().map(|&i| a.coords[i]).collect(),
        feats: perm.iter().flat_map(|&i| a.feat(i).to_vec()).collect(),
        ..a.clone()
    };
    let mut model = Model::new(NetworkConfig::tiny(), 52)?;
    randomize_params(&mut model.params, 53);
    let mut run = |c: &PointCloud| -> Result<(usize, Tensor)> {
        let batch = voxelize_batch(&[c], &model.config.voxel)?;
        let mut fw = Forward::new(&model.params, &mut model.buffers, false);
        let out = network_forward(&mut fw, &model.config, &batch, None, None)?;
        Ok((batch.len(), fw.tape.value(out.features).clone()))
    };
    let ((tokens, ya), (_, yb)) = (run(&a)?, run(&b)?);
    ensure(ya == yb, || "outputs differ under point permutation".into())?;
    Ok(format!("{n} points in {tokens} voxels, outputs bitwise equal"))
}

pub fn check_jsd() -> Result<String> {
    let same = jsd(&[vec![0.2, 0.8], vec![0.2, 0.8]], &[0.5, 0.5]);
    let disjoint = jsd(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, 0.5]);
    let half = jsd(&[vec![0.5, 0.5], vec![1.0, 0.0]], &[0.5, 0.5]);
    ensure(same.abs() < 1e-12, || format!("identical distributions give {same}"))?;
    ensure((disjoint - std::f64::consts::LN_2).abs() < 1e-12, || format!("disjoint gives {disjoint}"))?;
    ensure((half - 0.2158).abs() < 1e-4, || format!("half case gives {half}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..1000 {
        let (d, e) = (rng.gen_range(2..5), rng.gen_range(2..6));
        let probs: Vec<Vec<f64>> = (0..d)
            .map(|_| {
                let r: Vec<f64> = (0..e).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / s).collect();
        let v = jsd(&probs, &w);
        ensure((0.0..=entropy(&w) + 1e-12).contains(&v), || format!("jsd {v} outside [0, H(pi)]"))?;
    }
    Ok(format!("0 / ln 2 / {half:.6}; 1000 random cases bounded"))
}

pub fn check_param_accounting() -> Result<String> {
    let cfg = NetworkConfig::tiny();
    let model = Model::new(cfg.clone(), 0)?;
    for info in cfg.moe_layers() {
        let prefix = format!("{}.proj", info.name);
        let enumerated: usize = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{prefix}.")))
            .map(|(_, t)| t.numel())
            .sum();
        let (total, active) = count_params(&cfg.moe, info.dim);
        ensure(enumerated == total, || format!("{prefix}: enumerated {enumerated}, counted {total}"))?;
        ensure(active < total, || format!("{prefix}: activated {active} not below {total}"))?;
    }
    Ok(format!("{} MoE layers match enumeration", cfg.moe_layers().len()))
}

/// Runs every check; the gradient check dominates the runtime.
pub fn run_all() -> Vec<CheckResult> {
    let checks: Vec<(&'static str, fn() -> Result<String>)> = vec![
        ("gradient", || {
            let r = network_gradient_check(40, 1e-6)?;
            ensure(r.min_margin > 1e-3, || format!("router margin {} too small", r.min_margin))?;
            ensure(r.max_rel_error < 1e-4, || format!("max relative error {:e}", r.max_rel_error))?;
            Ok(format!("{} entries, max relative error {:.2e}", r.entries, r.max_rel_error))
        }),
        ("mixture_equivalence", check_mixture_equivalence),
        ("conditional_computation", check_conditional_computation),
        ("morton", check_morton),
        ("permutation_invariance", check_permutation_invariance),
        ("jsd", check_jsd),
        ("param_accounting", check_param_accounting),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let r = f();
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: match r {
                    Ok(d) => d,
                    Err(e) => e.to_string(),
                },
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
