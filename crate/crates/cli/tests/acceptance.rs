//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
//! criterion fails. Runs without the libtest harness so the report is always
//! printed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pointmoe::analytics::{
    collect_distributions, entropy, expert_class_matrix, jsd, jsd_report, pathways, route_scenes, stage_means,
    write_routing_log, DistributionKind, TrackedLog,
};
use pointmoe::blocks::{network_forward, voxelize_batch, Model, NetworkConfig, StageKind};
use pointmoe::config::RunConfig;
use pointmoe::langhead::ClassEmbeddingTable;
use pointmoe::moe::{build_params, count_params, expert_forward, moe_forward, MoEConfig};
use pointmoe::nn::{Activation, BufferStore, Forward, ParamBuilder, ParamStore};
use pointmoe::selfcheck::{network_gradient_check, randomize_params};
use pointmoe::serialization::morton_encode;
use pointmoe::syndata::{PointCloud, Registry};
use pointmoe::tensor::Tensor;
use pointmoe::train::classifier::descriptors;
use pointmoe::train::{evaluate, predict_points, prior_baseline_miou, train_dataset_classifier, DatasetClassifier, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: pointmoe::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let r = lib(network_gradient_check(40, 1e-6))?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} entries, max relative error {:.2e}, router margin {:.2e}, {secs:.1}s",
        r.entries, r.max_rel_error, r.min_margin
    );
    check(r.min_margin > 1e-3, || format!("routing too close to a tie: {detail}"))?;
    check(r.max_rel_error < 1e-4 && secs < 60.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2, 3

fn moe_store(dim: usize, cfg: &MoEConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut b = ParamBuilder {
        store: &mut store,
        buffers: &mut buffers,
        seed,
    };
    build_params(&mut b, "moe", dim, cfg).expect("valid layer");
    randomize_params(&mut store, seed + 1);
    store
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

struct MoeRun {
    out: Tensor,
    ids: Vec<usize>,
    gates: Vec<f64>,
    grads: Vec<Tensor>,
}

fn run_moe(store: &ParamStore, x: &Tensor, cfg: &MoEConfig) -> MoeRun {
    let mut buffers = BufferStore::new();
    let mut fw = Forward::new(store, &mut buffers, true);
    let xv = fw.tape.constant(x.clone());
    let o = moe_forward(&mut fw, xv, "moe", cfg, None).expect("forward");
    let out = fw.tape.value(o.out).clone();
    let loss = fw.tape.sum(o.out);
    MoeRun {
        out,
        ids: o.routing.expert_ids,
        gates: o.routing.gates,
        grads: fw.backward(loss).expect("backward"),
    }
}

/// Every expert applied to every token, independently of the routing code.
fn expert_outputs(store: &ParamStore, x: &Tensor, n: usize, act: Activation) -> Vec<Tensor> {
    (0..n)
        .map(|e| {
            let mut buffers = BufferStore::new();
            let mut fw = Forward::new(store, &mut buffers, false);
            let xv = fw.tape.constant(x.clone());
            let y = expert_forward(&mut fw, xv, &format!("moe.expert{e}"), act).expect("expert");
            fw.tape.value(y).clone()
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for n in 2..=6 {
        for act in [Activation::Relu, Activation::Silu] {
            let cfg = MoEConfig {
                num_experts: n,
                top_k: n,
                activation: act,
                ..MoEConfig::default()
            };
            let dim = rng.gen_range(3..9);
            let store = moe_store(dim, &cfg, 300 + n as u64);
            let x = random_matrix(&mut rng, 17, dim);
            let got = run_moe(&store, &x, &cfg).out;
            let ys = expert_outputs(&store, &x, n, act);
            let logits = x.matmul(store.get("moe.router").expect("router")).expect("shapes");
            for t in 0..x.rows() {
                let l = logits.row(t);
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
                for o in 0..dim {
                    let want: f64 = (0..n).map(|e| (l[e] - m).exp() / z * ys[e].get(t, o)).sum();
                    worst = worst.max((got.get(t, o) - want).abs());
                }
            }
        }
    }
    check(worst < 1e-12, || format!("k = N deviates from the dense mixture by {worst:e}"))?;

    let one = MoEConfig {
        num_experts: 1,
        top_k: 1,
        ..MoEConfig::default()
    };
    let store = moe_store(7, &one, 400);
    let x = random_matrix(&mut rng, 23, 7);
    let got = run_moe(&store, &x, &one).out;
    let want = &expert_outputs(&store, &x, 1, one.activation)[0];
    check(got == *want, || "N = 1 layer is not bitwise equal to its expert".into())?;

    let mut moe_net = NetworkConfig::tiny();
    moe_net.moe.num_experts = 1;
    moe_net.moe.top_k = 1;
    let mut dense_net = moe_net.clone();
    dense_net.variant = pointmoe::blocks::ModelVariant::Dense;
    let cloud = random_cloud(&mut rng, 300, 5.0);
    let mut feats = Vec::new();
    for cfg in [moe_net, dense_net] {
        let mut m = lib(Model::new(cfg, 401))?;
        let batch = lib(voxelize_batch(&[&cloud], &m.config.voxel))?;
        let mut fw = Forward::new(&m.params, &mut m.buffers, false);
        let out = lib(network_forward(&mut fw, &m.config, &batch, None, None))?;
        feats.push(fw.tape.value(out.features).clone());
    }
    check(feats[0] == feats[1], || "N = 1 network is not bitwise equal to the dense network".into())?;
    Ok(format!("max |k=N - mixture| = {worst:.2e} over 10 layers; N=1 layer and network bitwise equal"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut cases = 0;
    for n in 2..=6 {
        for k in 1..n {
            let cfg = MoEConfig {
                num_experts: n,
                top_k: k,
                ..MoEConfig::default()
            };
            let dim = 5;
            let mut store = moe_store(dim, &cfg, 500 + (n * 10 + k) as u64);
            let dead = n - 1;
            {
                let router = store.get_mut("moe.router").expect("router");
                for i in 0..dim {
                    router.data_mut()[i * n + dead] = -50.0;
                }
            }
            let x = Tensor::new(vec![40, dim], (0..40 * dim).map(|_| rng.gen_range(0.1..1.0)).collect()).expect("sized");
            let base = run_moe(&store, &x, &cfg);
            check(base.ids.iter().all(|&e| e != dead), || format!("N={n} k={k}: dead expert selected"))?;

            let used: HashSet<usize> = base.ids.iter().copied().collect();
            let mut perturbed = store.clone();
            for e in (0..n).filter(|e| !used.contains(e)) {
                for s in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
                    let t = perturbed.get_mut(&format!("moe.expert{e}.{s}")).expect("expert");
                    t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
                }
            }
            let again = run_moe(&perturbed, &x, &cfg);
            check(again.out == base.out, || format!("N={n} k={k}: output changed when unselected experts changed"))?;

            for (i, (name, _)) in store.iter().enumerate() {
                let e: Option<usize> = name
                    .strip_prefix("moe.expert")
                    .and_then(|r| r.split('.').next())
                    .and_then(|s| s.parse().ok());
                if e.is_some_and(|e| !used.contains(&e)) {
                    check(base.grads[i].data().iter().all(|&g| g == 0.0), || {
                        format!("N={n} k={k}: {name} has nonzero gradient")
                    })?;
                }
            }

            for t in 0..x.rows() {
                let mut full = vec![0.0; n];
                for r in 0..k {
                    full[base.ids[t * k + r]] += base.gates[t * k + r];
                }
                let sum: f64 = full.iter().sum();
                let nonzero = full.iter().filter(|&&g| g != 0.0).count();
                check((sum - 1.0).abs() <= 1e-9 && nonzero == k, || {
                    format!("N={n} k={k} token {t}: gates {full:?}")
                })?;
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (N, k) layers: NaN-filled unselected experts unread, zero gradient, k nonzero gates summing to 1"))
}

// ---------------------------------------------------------------- 4

/// Bit-string interleave: from the top bit down, emit z, y, x.
fn morton_oracle(v: [u32; 3], bits: u32) -> u64 {
    let mut s = String::from("0");
    for b in (0..bits).rev() {
        for a in [2, 1, 0] {
            s.push(if v[a] >> b & 1 == 1 { '1' } else { '0' });
        }
    }
    u64::from_str_radix(&s, 2).expect("binary")
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
    PointCloud {
        coords: (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..extent))).collect(),
        feats: (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        num_feats: 3,
        labels: vec![0; n],
        dataset_tag: None,
    }
}

fn permuted(c: &PointCloud, perm: &[usize]) -> PointCloud {
    let f = c.num_feats;
    PointCloud {
        coords: perm.iter().map(|&i| c.coords[i]).collect(),
        feats: perm.iter().flat_map(|&i| c.feats[i * f..(i + 1) * f].to_vec()).collect(),
        labels: perm.iter().map(|&i| c.labels[i]).collect(),
        ..c.clone()
    }
}

fn criterion_4(data: &Data) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..10_000 {
        let bits = rng.gen_range(1..=21);
        let v = [0, 1, 2].map(|_| rng.gen_range(0..(1u32 << bits)));
        let got = lib(morton_encode(v, bits))?;
        check(got == morton_oracle(v, bits), || format!("{v:?} at {bits} bits: {got}"))?;
    }
    let mut seen = HashSet::new();
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..8 {
                seen.insert(lib(morton_encode([x, y, z], 3))?);
            }
        }
    }
    check(seen.len() == 512, || format!("{} distinct codes of 512", seen.len()))?;

    let mut model = lib(Model::new(NetworkConfig::tiny(), 405))?;
    randomize_params(&mut model.params, 406);
    let scene = &data.registry.get("indoor").expect("indoor").val[0];
    let mut perm: Vec<usize> = (0..scene.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let shuffled = permuted(scene, &perm);
    let features = |c: &PointCloud, m: &mut Model| -> Result<Tensor, String> {
        let batch = lib(voxelize_batch(&[c], &m.config.voxel))?;
        let mut fw = Forward::new(&m.params, &mut m.buffers, false);
        let out = lib(network_forward(&mut fw, &m.config, &batch, None, None))?;
        Ok(fw.tape.value(out.features).clone())
    };
    let (a, b) = (features(scene, &mut model)?, features(&shuffled, &mut model)?);
    check(a == b, || "token features change under point permutation".into())?;
    let space = &data.registry.get("indoor").expect("indoor").spec.label_space;
    let cm = lib(data.table.class_matrix(space))?;
    let pa = lib(predict_points(&model, scene, &cm, 10.0, None, 192))?;
    let pb = lib(predict_points(&model, &shuffled, &cm, 10.0, None, 192))?;
    check(perm.iter().enumerate().all(|(j, &i)| pb[j] == pa[i]), || {
        "fragment predictions change under point permutation".into()
    })?;
    Ok(format!(
        "10000 random triples match the bit-string oracle; 512/512 distinct; {} points permuted, features and fragment predictions identical",
        scene.len()
    ))
}

// ---------------------------------------------------------------- 5

/// `Σ_d w_d KL(p_d ‖ m)`, the divergence form of the entropy identity the
/// library uses.
fn jsd_kl_form(probs: &[Vec<f64>], w: &[f64]) -> f64 {
    let e = probs[0].len();
    let m: Vec<f64> = (0..e).map(|i| probs.iter().zip(w).map(|(p, wd)| wd * p[i]).sum()).collect();
    probs
        .iter()
        .zip(w)
        .map(|(p, wd)| wd * (0..e).filter(|&i| p[i] > 0.0).map(|i| p[i] * (p[i] / m[i]).ln()).sum::<f64>())
        .sum()
}

struct Recount {
    paths: BTreeMap<(Vec<usize>, String), u64>,
    cooc: BTreeMap<(usize, usize, usize), u64>,
    top1: BTreeMap<(usize, String, usize), u64>,
}

/// Pathway, co-occurrence and top-1 counts straight from the routing CSV and
/// lineage sidecar text.
fn recount(csv: &str, lineage: &str) -> Recount {
    let mut expert: HashMap<(usize, usize, usize), (usize, String)> = HashMap::new();
    let mut top1 = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let n = |i: usize| f[i].parse::<usize>().expect("integer column");
        if n(3) == 0 {
            expert.insert((n(0), n(1), n(2)), (n(4), f[6].to_string()));
            *top1.entry((n(1), f[6].to_string(), n(4))).or_insert(0) += 1;
        }
    }
    let mut layers: Vec<(usize, usize)> = Vec::new();
    let mut paths = BTreeMap::new();
    let mut cooc = BTreeMap::new();
    let mut log = 0;
    let mut parents: Vec<Vec<usize>> = Vec::new();
    let mut tracked: Vec<usize> = Vec::new();
    for line in lineage.lines() {
        let w: Vec<&str> = line.split_whitespace().collect();
        let nums = |from: usize| w[from..].iter().map(|s| s.parse::<usize>().expect("integer")).collect::<Vec<_>>();
        match w.first().copied() {
            Some("layer") => layers.push((w[1].parse().expect("id"), w[3].parse().expect("level"))),
            Some("log") => {
                log = w[1].parse().expect("log index");
                parents.clear();
            }
            Some("parent") => parents.push(nums(2)),
            Some("tracked") => tracked = nums(1),
            Some("pred") => {
                let preds = if w[1] == "-" { Vec::new() } else { nums(1) };
                for (j, &t) in tracked.iter().enumerate() {
                    let mut path = Vec::new();
                    let mut tag = String::new();
                    for &(layer, level) in &layers {
                        let a = parents[..level].iter().fold(t, |tok, map| map[tok]);
                        let (e, tg) = expert[&(log, layer, a)].clone();
                        path.push(e);
                        tag = tg;
                        if let Some(&c) = preds.get(j) {
                            *cooc.entry((layer, e, c)).or_insert(0) += 1;
                        }
                    }
                    *paths.entry((path, tag)).or_insert(0) += 1;
                }
            }
            _ => {}
        }
    }
    Recount { paths, cooc, top1 }
}

fn criterion_5(data: &Data) -> Outcome {
    let same = jsd(&[vec![0.2, 0.8], vec![0.2, 0.8]], &[0.5, 0.5]);
    let disjoint = jsd(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, 0.5]);
    let half = jsd(&[vec![0.5, 0.5], vec![1.0, 0.0]], &[0.5, 0.5]);
    check(same.abs() < 1e-12, || format!("identical distributions: {same}"))?;
    check((disjoint - std::f64::consts::LN_2).abs() < 1e-12, || format!("disjoint: {disjoint}"))?;
    check((half - 0.2158).abs() < 1e-4 && (half - 0.215_761_554_338_835_65).abs() < 1e-12, || {
        format!("half case: {half}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for case in 0..1000 {
        let (d, e) = (rng.gen_range(2..6), rng.gen_range(2..9));
        let probs: Vec<Vec<f64>> = (0..d)
            .map(|_| {
                let r: Vec<f64> = (0..e).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
                let s: f64 = r.iter().sum::<f64>().max(1e-300);
                let mut p: Vec<f64> = r.iter().map(|v| v / s).collect();
                if s <= 1e-300 {
                    p[0] = 1.0;
                }
                p
            })
            .collect();
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / s).collect();
        let v = jsd(&probs, &w);
        check(v >= 0.0 && v <= entropy(&w) + 1e-12, || format!("case {case}: {v} outside [0, H(pi)]"))?;
        let kl = jsd_kl_form(&probs, &w);
        check((v - kl).abs() < 1e-12, || format!("case {case}: {v} vs KL form {kl}"))?;
    }

    let mut model = lib(Model::new(NetworkConfig::tiny(), 506))?;
    randomize_params(&mut model.params, 507);
    let mut classes: Vec<String> = Vec::new();
    let mut logs: Vec<TrackedLog> = Vec::new();
    for name in ["indoor", "outdoor"] {
        let d = data.registry.get(name).expect("dataset");
        let cm = lib(data.table.class_matrix(&d.spec.label_space))?;
        let offset = classes.len();
        classes.extend(d.spec.label_space.classes.iter().map(|c| format!("{name}/{c}")));
        for mut tl in lib(route_scenes(&model, &d.val[..2], None, 192, Some((&cm, 10.0))))? {
            tl.predictions.iter_mut().flatten().for_each(|c| *c += offset);
            logs.push(tl);
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (csv, lin) = (dir.path().join("routing.csv"), dir.path().join("routing.lineage"));
    lib(write_routing_log(&csv, &lin, &logs, &classes))?;
    let rc = recount(
        &std::fs::read_to_string(&csv).map_err(|e| e.to_string())?,
        &std::fs::read_to_string(&lin).map_err(|e| e.to_string())?,
    );

    let table = lib(pathways(&logs, usize::MAX))?;
    let mut lib_paths = BTreeMap::new();
    for row in &table.rows {
        for (d, &c) in table.datasets.iter().zip(&row.per_dataset) {
            if c > 0 {
                lib_paths.insert((row.path.clone(), d.clone()), c);
            }
        }
    }
    check(lib_paths == rc.paths, || {
        format!("pathway counts differ: {} library vs {} recounted entries", lib_paths.len(), rc.paths.len())
    })?;

    let n = model.config.moe.num_experts;
    let mut lib_cooc = BTreeMap::new();
    for m in lib(expert_class_matrix(&logs, n, classes.len()))? {
        for (e, row) in m.counts.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v > 0 {
                    lib_cooc.insert((m.layer_id, e, c), v);
                }
            }
        }
    }
    check(lib_cooc == rc.cooc, || "expert-class co-occurrence differs from the recount".into())?;

    let records: Vec<_> = lib(logs.iter().map(|l| l.records()).collect::<pointmoe::Result<Vec<_>>>())?.concat();
    let dists = lib(collect_distributions(&records, n, DistributionKind::Top1))?;
    for dist in &dists {
        for (di, name) in dist.datasets.iter().enumerate() {
            let total: u64 = (0..n).map(|e| rc.top1.get(&(dist.layer_id, name.clone(), e)).copied().unwrap_or(0)).sum();
            for e in 0..n {
                let want = rc.top1.get(&(dist.layer_id, name.clone(), e)).copied().unwrap_or(0) as f64 / total as f64;
                check((dist.probs[di][e] - want).abs() < 1e-12, || {
                    format!("layer {} {name} expert {e}: {} vs recount {want}", dist.layer_id, dist.probs[di][e])
                })?;
            }
        }
    }
    let tokens: u64 = table.tracked.iter().sum();
    Ok(format!(
        "0 / ln 2 / {half:.6}; 1000 random cases in [0, H(pi)] and equal to the KL form; {} pathways over {tokens} tokens and {} co-occurrence cells match the file recount",
        table.distinct,
        lib_cooc.len()
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut layers = 0;
    for (n, k, shared, mult) in [(4, 2, 0, 1.0), (8, 1, 0, 2.0), (6, 3, 1, 0.5), (2, 1, 2, 1.5), (3, 3, 0, 1.0)] {
        let mut cfg = NetworkConfig::tiny();
        cfg.moe.num_experts = n;
        cfg.moe.top_k = k;
        cfg.moe.num_shared_experts = shared;
        cfg.moe.expert_hidden_multiplier = mult;
        let model = lib(Model::new(cfg.clone(), 600))?;
        for info in cfg.moe_layers() {
            let prefix = format!("{}.proj.", info.name);
            let mut total = 0;
            let mut per_expert: BTreeMap<String, usize> = BTreeMap::new();
            let mut router = 0;
            for (name, t) in model.params.iter().filter(|(name, _)| name.starts_with(&prefix)) {
                total += t.numel();
                let rest = &name[prefix.len()..];
                if rest == "router" {
                    router += t.numel();
                } else {
                    *per_expert.entry(rest.split('.').next().expect("expert").to_string()).or_default() += t.numel();
                }
            }
            let routed = per_expert.iter().filter(|(e, _)| e.starts_with("expert")).count();
            let one_expert = per_expert.get("expert0").copied().unwrap_or(0);
            let shared_total: usize = per_expert.iter().filter(|(e, _)| e.starts_with("shared")).map(|(_, v)| v).sum();
            let activated = router + k * one_expert + shared_total;
            let (t, a) = count_params(&cfg.moe, info.dim);
            check(routed == n && t == total && a == activated, || {
                format!("{prefix} N={n} k={k}: counted ({t}, {a}), enumerated ({total}, {activated})")
            })?;
            check((k < n) == (a < t), || format!("{prefix} N={n} k={k}: activated {a}, total {t}"))?;
            layers += 1;
        }
    }
    Ok(format!("{layers} MoE layers over 5 configurations match enumeration; activated < total exactly when k < N"))
}

// ---------------------------------------------------------------- 7 to 11

struct Data {
    registry: Registry,
    table: ClassEmbeddingTable,
}

struct Run {
    model: Model,
    seconds: f64,
    /// Validation mIoU per training dataset, in registry order.
    val: Vec<(String, f64)>,
}

fn config(seed: u64, steps: usize, mode: &str) -> RunConfig {
    let mut c = RunConfig::default();
    for kv in [
        format!("seed={seed}"),
        format!("train.total_steps={steps}"),
        format!("batch.mode={mode}"),
    ] {
        c.apply(&kv).expect("known key");
    }
    c
}

fn train(data: &Data, cfg: &RunConfig) -> Result<Model, String> {
    let n = data.registry.training().len();
    let model = lib(Model::new(lib(cfg.network(n))?, lib(cfg.seed())?))?;
    let mut t = lib(Trainer::new(model, lib(cfg.train())?, lib(cfg.plan(n))?, &data.registry, &data.table))?;
    lib(t.run(&data.registry, 0, |_, _| Ok(())))?;
    Ok(t.model)
}

fn train_and_eval(data: &Data, cfg: &RunConfig) -> Result<Run, String> {
    let start = Instant::now();
    let model = train(data, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut val = Vec::new();
    for d in data.registry.training() {
        let m = lib(evaluate(&model, &d.val, &d.spec.label_space, &data.table, 10.0, None, 192))?;
        val.push((d.spec.name.clone(), m.miou));
    }
    Ok(Run { model, seconds, val })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_val(val: &[(String, f64)]) -> String {
    val.iter().map(|(n, m)| format!("{n} {m:.3}")).collect::<Vec<_>>().join(", ")
}

fn criterion_7(data: &Data) -> Outcome {
    let cfg = config(0, 500, "mixed");
    let moe = lib(cfg.moe())?;
    check(moe.num_experts == 4 && moe.top_k == 2 && moe.aux_loss_alpha == 0.0, || format!("{moe:?}"))?;
    let run = train_and_eval(data, &cfg)?;
    let again = train(data, &cfg)?;
    let same = run.model.params.iter().zip(again.params.iter()).all(|(a, b)| a == b)
        && run.model.buffers == again.buffers;
    let detail = format!(
        "val mIoU {}; trained in {:.0}s; retrain bitwise identical: {same}",
        fmt_val(&run.val),
        run.seconds
    );
    check(run.val.iter().all(|(_, m)| *m >= 0.80) && run.seconds < 600.0 && same, || detail.clone())?;
    Ok(detail)
}

struct SeedRuns {
    mixed: Vec<Run>,
    homogeneous: Vec<Run>,
}

fn criterion_8(runs: &SeedRuns) -> Outcome {
    let m: Vec<f64> = runs.mixed.iter().map(|r| mean(r.val.iter().map(|v| v.1))).collect();
    let h: Vec<f64> = runs.homogeneous.iter().map(|r| mean(r.val.iter().map(|v| v.1))).collect();
    let (mm, hm) = (mean(m.iter().copied()), mean(h.iter().copied()));
    let per_seed: Vec<String> = m.iter().zip(&h).map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    let detail = format!(
        "mixed {mm:.4} vs homogeneous {hm:.4}, margin {:+.4} (per seed mixed/homogeneous: {})",
        mm - hm,
        per_seed.join(", ")
    );
    check(mm >= hm, || detail.clone())?;
    Ok(detail)
}

fn criterion_9(data: &Data, runs: &SeedRuns) -> Outcome {
    let mut enc = Vec::new();
    let mut dec = Vec::new();
    for run in &runs.mixed {
        let mut logs = Vec::new();
        for d in data.registry.training() {
            logs.extend(lib(route_scenes(&run.model, &d.val, None, 192, None))?);
        }
        let records: Vec<_> = lib(logs.iter().map(|l| l.records()).collect::<pointmoe::Result<Vec<_>>>())?.concat();
        let dists = lib(collect_distributions(&records, run.model.config.moe.num_experts, DistributionKind::Top1))?;
        let rows = lib(jsd_report(&dists, &logs[0].log.layers))?;
        check(rows.iter().any(|r| r.stage == StageKind::Decoder), || "no decoder MoE layer".into())?;
        let (e, d) = stage_means(&rows);
        enc.push(e.ok_or("no encoder layers")?);
        dec.push(d.ok_or("no decoder layers")?);
    }
    let (e, d) = (mean(enc.iter().copied()), mean(dec.iter().copied()));
    let per: Vec<String> = enc.iter().zip(&dec).map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    let detail = format!(
        "mean JSD decoder {d:.4} vs encoder {e:.4} nats (per seed encoder/decoder: {})",
        per.join(", ")
    );
    check(d > e, || detail.clone())?;
    Ok(detail)
}

fn criterion_10(data: &Data, runs: &SeedRuns) -> Outcome {
    let held = data.registry.datasets.iter().find(|d| d.spec.held_out).ok_or("no held-out dataset")?;
    let scenes: Vec<PointCloud> = held
        .train
        .iter()
        .chain(&held.val)
        .map(|c| PointCloud {
            dataset_tag: None,
            ..c.clone()
        })
        .collect();
    let prior = lib(prior_baseline_miou(&scenes, held.spec.label_space.len()))?;
    let mut got = Vec::new();
    for run in &runs.mixed {
        let m = lib(evaluate(&run.model, &scenes, &held.spec.label_space, &data.table, 10.0, None, 192))?;
        got.push(m.miou);
    }
    let detail = format!(
        "held-out mIoU {} vs class-prior baseline {prior:.3} over {} scenes",
        got.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
        scenes.len()
    );
    check(got.iter().all(|&m| m > prior), || detail.clone())?;
    Ok(detail)
}

fn criterion_11(data: &Data) -> Outcome {
    let base = RunConfig::default();
    let clf: DatasetClassifier = lib(train_dataset_classifier(&data.registry, &lib(base.classifier())?))?;
    let (x, y) = lib(descriptors(&data.registry, true))?;
    let acc = clf.accuracy(&x, &y);
    check(acc >= 0.95, || format!("classifier held-out accuracy {acc:.4}"))?;

    let mut cfg = config(0, 500, "mixed");
    cfg.apply("model.variant=conditioned_norm").expect("known key");
    cfg.apply("model.moe_position=none").expect("known key");
    let start = Instant::now();
    let model = train(data, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    let mut routed = 0;
    for d in &data.registry.datasets {
        let scenes: Vec<PointCloud> = if d.spec.held_out {
            d.train.iter().chain(&d.val).cloned().collect()
        } else {
            d.val.clone()
        };
        let tables = lib(scenes.iter().map(|c| clf.predict(c)).collect::<pointmoe::Result<Vec<_>>>())?;
        if !d.spec.held_out {
            let truth = data.registry.training().iter().position(|t| t.spec.name == d.spec.name).expect("training");
            routed += tables.iter().filter(|&&t| t == truth).count();
        }
        let m = lib(evaluate(&model, &scenes, &d.spec.label_space, &data.table, 10.0, Some(&tables), 192))?;
        check(m.miou.is_finite(), || format!("{}: mIoU {}", d.spec.name, m.miou))?;
        parts.push(format!("{} {:.3}", d.spec.name, m.miou));
    }
    Ok(format!(
        "classifier accuracy {acc:.4} on {} validation scenes; conditioned-norm baseline ({secs:.0}s) with predicted tables ({routed} val scenes routed to their own table): {}",
        y.len(),
        parts.join(", ")
    ))
}

// ---------------------------------------------------------------- 12

fn pmoe(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pmoe"))
        .args(args)
        .env_remove("PMOE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("pmoe {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let overrides = [
        "--override",
        "train.total_steps=3",
        "data.indoor_scenes=8",
        "data.outdoor_scenes=8",
        "data.heldout_scenes=4",
    ];
    for run in ["a", "b"] {
        let out = p(run);
        let mut args = vec!["train", "--out", &out];
        args.extend(overrides);
        pmoe(&args)?;
    }
    for f in ["config.txt", "metrics.jsonl", "model.pmoe"] {
        let (a, b) = (read(&dir.path().join("a").join(f))?, read(&dir.path().join("b").join(f))?);
        check(a == b, || format!("train output {f} differs between invocations"))?;
    }
    let (ck_a, ck_b) = (p("a/model.pmoe"), p("b/model.pmoe"));
    pmoe(&["eval", "--checkpoint", &ck_a, "--out", &p("eval1.json")])?;
    pmoe(&["eval", "--checkpoint", &ck_b, "--out", &p("eval2.json")])?;
    let (a, b) = (read(&dir.path().join("eval1.json"))?, read(&dir.path().join("eval2.json"))?);
    check(a == b, || "eval output differs between invocations".into())?;
    Ok(format!(
        "train (3 steps) twice: config, metrics and checkpoint bytes equal; eval twice: {} identical bytes",
        a.len()
    ))
}

// ----------------------------------------------------------------

fn report(n: usize, outcome: &Outcome, elapsed: Duration) -> bool {
    let (tag, text, ok) = match outcome {
        Ok(d) => ("PASS", d.as_str(), true),
        Err(d) => ("FAIL", d.as_str(), false),
    };
    println!("criterion {n:>2}: {tag} [{:.1}s] {text}", elapsed.as_secs_f64());
    ok
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let registry = Registry::new(&RunConfig::default().datasets().expect("default datasets")).expect("registry");
    let table = RunConfig::default().embeddings().expect("default embeddings");
    let data = Data { registry, table };

    let mut results: Vec<(usize, Outcome, Duration)> = Vec::new();
    let mut record = |n: usize, (o, d): (Outcome, Duration)| {
        report(n, &o, d);
        results.push((n, o, d));
    };
    record(1, timed(criterion_1));
    record(2, timed(criterion_2));
    record(3, timed(criterion_3));
    record(4, timed(|| criterion_4(&data)));
    record(5, timed(|| criterion_5(&data)));
    record(6, timed(criterion_6));
    record(7, timed(|| criterion_7(&data)));

    let start = Instant::now();
    let mut runs = SeedRuns {
        mixed: Vec::new(),
        homogeneous: Vec::new(),
    };
    let mut failed = None;
    for seed in 0..3 {
        for mode in ["mixed", "homogeneous"] {
            match train_and_eval(&data, &config(seed, 2000, mode)) {
                Ok(r) => {
                    println!(
                        "  seed {seed} {mode:<11} 2000 steps in {:.0}s: {}",
                        r.seconds,
                        fmt_val(&r.val)
                    );
                    if mode == "mixed" {
                        runs.mixed.push(r);
                    } else {
                        runs.homogeneous.push(r);
                    }
                }
                Err(e) => failed = Some(format!("seed {seed} {mode}: {e}")),
            }
        }
    }
    let shared = start.elapsed();
    match failed {
        Some(e) => {
            for n in 8..=10 {
                record(n, (Err(e.clone()), shared));
            }
        }
        None => {
            let (o, d) = timed(|| criterion_8(&runs));
            record(8, (o, d + shared));
            record(9, timed(|| criterion_9(&data, &runs)));
            record(10, timed(|| criterion_10(&data, &runs)));
        }
    }
    record(11, timed(|| criterion_11(&data)));
    record(12, timed(criterion_12));

    let passed = results.iter().filter(|r| r.1.is_ok()).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
