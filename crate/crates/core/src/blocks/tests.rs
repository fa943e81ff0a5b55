use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{BufferStore, ParamStore};
use crate::tensor::attention_weights;

fn cloud(coords: Vec<[f64; 3]>, feats: Vec<f64>, num_feats: usize) -> PointCloud {
    let n = coords.len();
    PointCloud {
        coords,
        feats,
        num_feats,
        labels: vec![0; n],
        dataset_tag: None,
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
    let coords = (0..n)
        .map(|_| [rng.gen_range(0.0..extent), rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)])
        .collect();
    let feats = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut c = cloud(coords, feats, 3);
    c.labels = (0..n).map(|_| rng.gen_range(-1..4)).collect();
    c
}

fn randomize(params: &mut ParamStore, seed: u64) {
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

fn block_cfg(dim: usize, heads: usize, window: usize, norm: NormKind, pos: MoePosition) -> BlockConfig {
    BlockConfig {
        dim,
        num_heads: heads,
        window_size: window,
        norm_kind: norm,
        moe_position: pos,
        moe: MoEConfig::default(),
        ffn_multiplier: 2.0,
        mixer: Mixer::Moe,
    }
}

fn state(fw: &mut Forward<'_>, x: Tensor, codes: Vec<u64>) -> TokenState {
    let t = codes.len();
    TokenState {
        features: fw.tape.constant(x),
        codes,
        segments: vec![0..t],
        parent_map: None,
        labels: vec![0; t],
        tags: vec![None],
        norm_groups: None,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---- embed ----

#[test]
fn embed_single_voxel_gives_one_token() {
    let c = cloud(
        vec![[0.01, 0.02, 0.03], [0.1, 0.1, 0.1], [0.2, 0.05, 0.12]],
        vec![1.0, 2.0, 3.0],
        1,
    );
    let b = voxelize_batch(&[&c], &VoxelSettings::default()).unwrap();
    assert_eq!(b.len(), 1);
    assert!((b.inputs.get(0, 0) - 2.0).abs() < 1e-15);
}

#[test]
fn embed_two_voxels_share_feature_part() {
    let c = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], vec![0.3, -0.7, 0.3, -0.7], 2);
    let b = voxelize_batch(&[&c], &VoxelSettings::default()).unwrap();
    assert_eq!(b.len(), 2);
    assert_eq!(&b.inputs.row(0)[..2], &b.inputs.row(1)[..2]);
    assert_ne!(&b.inputs.row(0)[2..], &b.inputs.row(1)[2..]);
}

#[test]
fn embed_token_count_matches_distinct_voxels() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = random_cloud(&mut rng, 500, 3.0);
    let s = VoxelSettings::default();
    let b = voxelize_batch(&[&c], &s).unwrap();
    let oracle: HashSet<[i64; 3]> = c
        .coords
        .iter()
        .map(|p| std::array::from_fn(|a| (p[a] / s.cell_size).floor() as i64))
        .collect();
    assert_eq!(b.len(), oracle.len());
    assert!(b.codes.windows(2).all(|w| w[0] < w[1]));
    let total: usize = b.point_token[0].iter().collect::<HashSet<_>>().len();
    assert_eq!(total, b.len());
}

#[test]
fn embed_rejects_empty_cloud() {
    let c = cloud(Vec::new(), Vec::new(), 3);
    assert!(matches!(voxelize_batch(&[&c], &VoxelSettings::default()), Err(Error::Input(_))));
}

#[test]
fn majority_vote_ties_to_smaller_id() {
    assert_eq!(majority_label([3, 1, 3, 1, -1, -1, -1]), 1);
    assert_eq!(majority_label([2, 2, 5]), 2);
    assert_eq!(majority_label([-1, -1]), -1);
}

// ---- attention ----

#[test]
fn single_token_window_returns_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = crate::tensor::Tape::new();
    let q = tape.constant(random_matrix(&mut rng, 3, 4));
    let k = tape.constant(random_matrix(&mut rng, 3, 4));
    let vt = random_matrix(&mut rng, 3, 4);
    let v = tape.constant(vt.clone());
    let a = tape.window_attention(q, k, v, Arc::new(vec![0..1, 1..2, 2..3]), 2).unwrap();
    assert_eq!(tape.value(a), &vt);
}

#[test]
fn identical_tokens_attend_equally() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let row = random_matrix(&mut rng, 1, 4);
    let x = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
    let w = attention_weights(&x, &x, &[0..2], 2).unwrap();
    for head in &w {
        for p in head {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }
    let mut tape = crate::tensor::Tape::new();
    let xv = tape.constant(x);
    let v = tape.constant(random_matrix(&mut rng, 2, 4));
    let a = tape.window_attention(xv, xv, v, Arc::new(vec![0..2]), 2).unwrap();
    let a = tape.value(a);
    assert_eq!(a.row(0), a.row(1));
}

fn layer_norm_rows(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let m = r.iter().sum::<f64>() / d;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(c, a)| (a - m) / (v + 1e-5).sqrt() * gain[c] + bias[c])
                .collect()
        })
        .collect()
}

fn dense(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (din, dout) = (w.rows(), w.cols());
    x.iter()
        .map(|r| {
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| r[i] * w.get(i, o)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn p<'a>(params: &'a ParamStore, name: &str) -> &'a Tensor {
    params.get(name).unwrap()
}

/// Reference pre-norm block that builds the full `T×T` attention matrix with
/// out-of-window entries masked to `-inf`.
fn dense_reference_block(x: &Tensor, params: &ParamStore, prefix: &str, cfg: &BlockConfig) -> Vec<Vec<f64>> {
    let t = x.rows();
    let d = cfg.dim;
    let dh = d / cfg.num_heads;
    let rows: Vec<Vec<f64>> = (0..t).map(|i| x.row(i).to_vec()).collect();
    let pn = |n: &str| p(params, &format!("{prefix}.{n}"));
    let xn = layer_norm_rows(&rows, pn("norm1.gain").data(), pn("norm1.bias").data());
    let q = dense(&xn, pn("q.w"), pn("q.b"));
    let k = dense(&xn, pn("k.w"), pn("k.b"));
    let v = dense(&xn, pn("v.w"), pn("v.b"));
    let win = |i: usize| i / cfg.window_size;
    let mut a = vec![vec![0.0; d]; t];
    for h in 0..cfg.num_heads {
        let cs = h * dh..(h + 1) * dh;
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    if win(i) == win(j) {
                        cs.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cs.clone() {
                a[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let o = dense(&a, pn("proj.w"), pn("proj.b"));
    let x1: Vec<Vec<f64>> = rows.iter().zip(&o).map(|(r, o)| r.iter().zip(o).map(|(a, b)| a + b).collect()).collect();
    let yn = layer_norm_rows(&x1, pn("norm2.gain").data(), pn("norm2.bias").data());
    let h: Vec<Vec<f64>> = dense(&yn, pn("ffn.fc1.w"), pn("ffn.fc1.b"))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let f = dense(&h, pn("ffn.fc2.w"), pn("ffn.fc2.b"));
    x1.iter().zip(&f).map(|(r, f)| r.iter().zip(f).map(|(a, b)| a + b).collect()).collect()
}

fn built_block(cfg: &BlockConfig, seed: u64) -> (ParamStore, BufferStore) {
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut b = ParamBuilder {
        store: &mut params,
        buffers: &mut buffers,
        seed,
    };
    build_block(&mut b, "blk", cfg, 1).unwrap();
    (params, buffers)
}

#[test]
fn block_matches_dense_masked_attention_reference() {
    let cfg = block_cfg(8, 2, 4, NormKind::Layer, MoePosition::None);
    let (mut params, mut buffers) = built_block(&cfg, 3);
    randomize(&mut params, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(&mut rng, 10, 8);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let s = state(&mut fw, x.clone(), (0..10).collect());
    let (out, _) = attention_block(&mut fw, &s, "blk", &cfg, None).unwrap();
    let got = fw.tape.value(out.features).clone();
    let want = dense_reference_block(&x, &params, "blk", &cfg);
    for i in 0..10 {
        for c in 0..8 {
            assert!((got.get(i, c) - want[i][c]).abs() < 1e-10, "token {i} ch {c}");
        }
    }
}

#[test]
fn plain_block_is_the_standard_pre_norm_block() {
    let cfg = block_cfg(8, 2, 3, NormKind::Rms, MoePosition::None);
    let (mut params, mut buffers) = built_block(&cfg, 8);
    randomize(&mut params, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_matrix(&mut rng, 7, 8);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let s = state(&mut fw, x, (0..7).collect());
    let (out, _) = attention_block(&mut fw, &s, "blk", &cfg, None).unwrap();

    let xf = s.features;
    let xn = fw.norm(xf, "blk.norm1", NormKind::Rms).unwrap();
    let q = fw.linear(xn, "blk.q").unwrap();
    let k = fw.linear(xn, "blk.k").unwrap();
    let v = fw.linear(xn, "blk.v").unwrap();
    let a = fw.tape.window_attention(q, k, v, Arc::new(vec![0..3, 3..6, 6..7]), 2).unwrap();
    let o = fw.linear(a, "blk.proj").unwrap();
    let x1 = fw.tape.add(xf, o).unwrap();
    let yn = fw.norm(x1, "blk.norm2", NormKind::Rms).unwrap();
    let h = fw.linear(yn, "blk.ffn.fc1").unwrap();
    let h = fw.tape.relu(h);
    let f = fw.linear(h, "blk.ffn.fc2").unwrap();
    let want = fw.tape.add(x1, f).unwrap();
    assert_eq!(fw.tape.value(out.features), fw.tape.value(want));
}

#[test]
fn ffn_moe_block_records_routing() {
    let mut cfg = block_cfg(8, 2, 4, NormKind::Layer, MoePosition::Ffn);
    cfg.moe.num_experts = 3;
    cfg.moe.top_k = 2;
    let (mut params, mut buffers) = built_block(&cfg, 11);
    assert!(params.position("blk.ffn.router").is_some());
    assert!(params.position("blk.proj.w").is_some());
    randomize(&mut params, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_matrix(&mut rng, 6, 8);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let s = state(&mut fw, x, (0..6).collect());
    let mut records = Vec::new();
    let sink = BlockSink {
        records: &mut records,
        layer_id: 5,
    };
    let (out, aux) = attention_block(&mut fw, &s, "blk", &cfg, Some(sink)).unwrap();
    assert_eq!(out.len(), 6);
    assert!(aux.margin > 0.0);
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.layer_id == 5 && r.expert_ids.len() == 2));
}

#[test]
fn block_rejects_wrong_width() {
    let cfg = block_cfg(8, 2, 4, NormKind::Layer, MoePosition::None);
    let (params, mut buffers) = built_block(&cfg, 1);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let s = state(&mut fw, Tensor::zeros(&[3, 4]), vec![0, 1, 2]);
    assert!(matches!(attention_block(&mut fw, &s, "blk", &cfg, None), Err(Error::Dimension { .. })));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let q = random_matrix(&mut rng, 37, 12);
    let k = random_matrix(&mut rng, 37, 12);
    let windows = window_partition(37, 8).unwrap();
    for w in attention_weights(&q, &k, &windows, 3).unwrap() {
        let n = (w.len() as f64).sqrt() as usize;
        for r in w.chunks(n) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

// ---- pool / unpool ----

fn pool_params(d_in: usize, d_out: usize) -> (ParamStore, BufferStore) {
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut b = ParamBuilder {
        store: &mut params,
        buffers: &mut buffers,
        seed: 1,
    };
    build_pool(&mut b, "pool", d_in, d_out, NormKind::Layer, 1).unwrap();
    build_unpool(&mut b, "up", d_out, d_in, NormKind::Layer, 1).unwrap();
    (params, buffers)
}

#[test]
fn pool_single_group_is_linear_of_mean() {
    let (mut params, mut buffers) = pool_params(4, 6);
    randomize(&mut params, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_matrix(&mut rng, 5, 4);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let mut s = state(&mut fw, x.clone(), vec![8, 9, 10, 12, 15]);
    let out = pool(&mut fw, &mut s, "pool", 2, NormKind::Layer, None).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out.codes, vec![1]);
    assert_eq!(s.parent_map, Some(vec![0; 5]));
    let mean: Vec<f64> = (0..4).map(|c| (0..5).map(|r| x.get(r, c)).sum::<f64>() / 5.0).collect();
    let lin = dense(&[mean], p(&params, "pool.fc.w"), p(&params, "pool.fc.b"));
    let want = layer_norm_rows(&lin, p(&params, "pool.norm.gain").data(), p(&params, "pool.norm.bias").data());
    for c in 0..6 {
        assert!((fw.tape.value(out.features).get(0, c) - want[0][c]).abs() < 1e-12);
    }
}

#[test]
fn pool_collapses_an_octant() {
    let codes: Vec<u64> = (0..8).collect();
    let (parent, coarse, segs) = coarse_groups(&codes, &[0..8], 3);
    assert_eq!(parent, vec![0; 8]);
    assert_eq!(coarse, vec![0]);
    assert_eq!(segs, vec![0..1]);
}

#[test]
fn pool_labels_by_majority() {
    let (params, mut buffers) = pool_params(2, 2);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let mut s = state(&mut fw, Tensor::full(&[4, 2], 1.0), vec![0, 1, 8, 9]);
    s.labels = vec![2, 1, 3, -1];
    let out = pool(&mut fw, &mut s, "pool", 2, NormKind::Layer, None).unwrap();
    assert_eq!(out.labels, vec![1, 3]);
}

#[test]
fn pool_rejects_non_power_of_two() {
    let (params, mut buffers) = pool_params(2, 2);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let mut s = state(&mut fw, Tensor::zeros(&[2, 2]), vec![0, 1]);
    assert!(matches!(pool(&mut fw, &mut s, "pool", 3, NormKind::Layer, None), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn coarse_groups_match_hash_grouping(
        mut a in prop::collection::vec(0u64..4096, 1..60),
        mut b in prop::collection::vec(0u64..4096, 1..60),
        shift_pow in 1u32..4,
    ) {
        a.sort();
        b.sort();
        let shift = 3 * shift_pow;
        let codes: Vec<u64> = a.iter().chain(&b).copied().collect();
        let segs = vec![0..a.len(), a.len()..codes.len()];
        let (parent, coarse, csegs) = coarse_groups(&codes, &segs, shift);
        let oracle: HashSet<(usize, u64)> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| ((i >= a.len()) as usize, c >> shift))
            .collect();
        prop_assert_eq!(coarse.len(), oracle.len());
        for (i, &p) in parent.iter().enumerate() {
            prop_assert_eq!(coarse[p], codes[i] >> shift);
            let seg = (i >= a.len()) as usize;
            prop_assert!(csegs[seg].contains(&p));
        }
        prop_assert!(coarse[csegs[0].clone()].windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn unpool_broadcasts_coarse_contribution() {
    let (mut params, mut buffers) = pool_params(3, 5);
    randomize(&mut params, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let coarse = state(&mut fw, random_matrix(&mut rng, 1, 5), vec![0]);
    let mut skip = state(&mut fw, Tensor::zeros(&[3, 3]), vec![0, 1, 2]);
    skip.parent_map = Some(vec![0, 0, 0]);
    let out = unpool(&mut fw, &coarse, &skip, "up", NormKind::Layer, Activation::Relu).unwrap();
    let v = fw.tape.value(out.features);
    assert_eq!(v.row(0), v.row(1));
    assert_eq!(v.row(1), v.row(2));
}

#[test]
fn unpool_with_zero_coarse_and_identity_skip() {
    let (mut params, mut buffers) = pool_params(3, 4);
    randomize(&mut params, 8);
    *params.get_mut("up.skip.w").unwrap() = Tensor::eye(3);
    *params.get_mut("up.skip.b").unwrap() = Tensor::zeros(&[3]);
    *params.get_mut("up.coarse.b").unwrap() = Tensor::zeros(&[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let skip_x = random_matrix(&mut rng, 4, 3);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let coarse = state(&mut fw, Tensor::zeros(&[2, 4]), vec![0, 1]);
    let mut skip = state(&mut fw, skip_x.clone(), vec![0, 1, 8, 9]);
    skip.parent_map = Some(vec![0, 0, 1, 1]);
    let out = unpool(&mut fw, &coarse, &skip, "up", NormKind::Layer, Activation::Relu).unwrap();
    let rows: Vec<Vec<f64>> = (0..4).map(|i| skip_x.row(i).to_vec()).collect();
    let want = layer_norm_rows(&rows, p(&params, "up.norm.gain").data(), p(&params, "up.norm.bias").data());
    let got = fw.tape.value(out.features);
    for i in 0..4 {
        for c in 0..3 {
            assert!((got.get(i, c) - want[i][c].max(0.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn unpool_coarse_contribution_follows_parent_map() {
    let (mut params, mut buffers) = pool_params(3, 4);
    randomize(&mut params, 10);
    *params.get_mut("up.skip.w").unwrap() = Tensor::zeros(&[3, 3]);
    *params.get_mut("up.skip.b").unwrap() = Tensor::zeros(&[3]);
    *params.get_mut("up.norm.gain").unwrap() = Tensor::full(&[1, 3], 1.0);
    *params.get_mut("up.norm.bias").unwrap() = Tensor::zeros(&[1, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cx = random_matrix(&mut rng, 3, 4);
    let parent: Vec<usize> = (0..9).map(|_| rng.gen_range(0..3)).collect();
    let mut fw = Forward::new(&params, &mut buffers, false);
    let coarse = state(&mut fw, cx.clone(), vec![0, 1, 2]);
    let mut skip = state(&mut fw, random_matrix(&mut rng, 9, 3), (0..9).collect());
    skip.parent_map = Some(parent.clone());
    let out = unpool(&mut fw, &coarse, &skip, "up", NormKind::Layer, Activation::Silu).unwrap();
    let crows: Vec<Vec<f64>> = (0..3).map(|i| cx.row(i).to_vec()).collect();
    let lin = dense(&crows, p(&params, "up.coarse.w"), p(&params, "up.coarse.b"));
    let got = fw.tape.value(out.features);
    for (i, &pi) in parent.iter().enumerate() {
        let want = layer_norm_rows(&[lin[pi].clone()], &[1.0; 3], &[0.0; 3]);
        for c in 0..3 {
            let w = want[0][c] / (1.0 + (-want[0][c]).exp());
            assert!((got.get(i, c) - w).abs() < 1e-12);
        }
    }
}

#[test]
fn unpool_rejects_unmapped_tokens() {
    let (params, mut buffers) = pool_params(3, 4);
    let mut fw = Forward::new(&params, &mut buffers, false);
    let coarse = state(&mut fw, Tensor::zeros(&[1, 4]), vec![0]);
    let mut skip = state(&mut fw, Tensor::zeros(&[2, 3]), vec![0, 1]);
    let r = unpool(&mut fw, &coarse, &skip, "up", NormKind::Layer, Activation::Relu);
    assert!(matches!(r, Err(Error::Consistency(_))));
    skip.parent_map = Some(vec![0, 1]);
    let r = unpool(&mut fw, &coarse, &skip, "up", NormKind::Layer, Activation::Relu);
    assert!(matches!(r, Err(Error::Consistency(_))));
}

// ---- network ----

fn small_net(norm: NormKind) -> NetworkConfig {
    let mut cfg = NetworkConfig::tiny();
    cfg.encoder = vec![
        StageConfig {
            num_blocks: 1,
            dim: 8,
            window_size: 8,
        },
        StageConfig {
            num_blocks: 1,
            dim: 16,
            window_size: 8,
        },
    ];
    cfg.decoder = vec![StageConfig {
        num_blocks: 1,
        dim: 8,
        window_size: 8,
    }];
    cfg.embed_dim = 8;
    cfg.head_embed_dim = 6;
    cfg.num_heads = 2;
    cfg.in_features = 6;
    cfg.norm_kind = norm;
    cfg
}

fn forward_eval(model: &mut Model, batch: &VoxelBatch, log: Option<&mut RoutingLog>) -> (Tensor, f64) {
    let mut fw = Forward::new(&model.params, &mut model.buffers, false);
    let out = network_forward(&mut fw, &model.config, batch, None, log).unwrap();
    (fw.tape.value(out.features).clone(), out.margin)
}

#[test]
fn network_output_shape_and_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let c = random_cloud(&mut rng, 300, 4.0);
    let mut model = Model::new(small_net(NormKind::Batch), 1).unwrap();
    let batch = voxelize_batch(&[&c], &model.config.voxel).unwrap();
    let mut log = RoutingLog::default();
    let (y, _) = forward_eval(&mut model, &batch, Some(&mut log));
    assert_eq!(y.shape(), &[batch.len(), 6]);
    assert_eq!(log.layers.len(), 3);
    assert_eq!(log.records.len(), 2 * batch.len() + log.level_sizes[1]);
    for l in &log.layers {
        assert!(log.records.iter().any(|r| r.layer_id == l.layer_id));
    }
    assert_eq!(log.level_sizes[0], batch.len());
    assert_eq!(log.parent_maps[0].len(), batch.len());
}

#[test]
fn network_is_invariant_to_point_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 600;
    let a = random_cloud(&mut rng, n, 2.0);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let b = cloud(
        perm.iter().map(|&i| a.coords[i]).collect(),
        perm.iter().flat_map(|&i| a.feat(i).to_vec()).collect(),
        a.num_feats,
    );
    let mut model = Model::new(small_net(NormKind::Batch), 2).unwrap();
    randomize(&mut model.params, 3);
    let ba = voxelize_batch(&[&a], &model.config.voxel).unwrap();
    let bb = voxelize_batch(&[&b], &model.config.voxel).unwrap();
    assert!(ba.len() < n);
    assert_eq!(ba.codes, bb.codes);
    assert_eq!(ba.inputs, bb.inputs);
    let (ya, _) = forward_eval(&mut model, &ba, None);
    let (yb, _) = forward_eval(&mut model, &bb, None);
    assert_eq!(ya, yb);
}

#[test]
fn layer_norm_removes_input_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let c = random_cloud(&mut rng, 200, 4.0);
    let model = Model::new(small_net(NormKind::Layer), 4).unwrap();
    let mut batch = voxelize_batch(&[&c], &model.config.voxel).unwrap();
    batch.inputs.data_mut().iter_mut().for_each(|v| *v *= 100.0);
    let mut doubled = batch.clone();
    doubled.inputs.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let run = |b: &VoxelBatch| {
        let mut buffers = model.buffers.clone();
        let mut fw = Forward::new(&model.params, &mut buffers, false);
        let x = fw.tape.constant(b.inputs.clone());
        let h = fw.linear(x, "embed.fc").unwrap();
        let y = fw.norm(h, "embed.norm", NormKind::Layer).unwrap();
        (fw.tape.value(h).clone(), fw.tape.value(y).clone())
    };
    let (h1, y1) = run(&batch);
    let (h2, y2) = run(&doubled);
    assert!(h1.max_abs_diff(&h2) > 1.0);
    assert!(y1.max_abs_diff(&y2) < 1e-6);
}

#[test]
fn single_expert_network_equals_dense_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let c = random_cloud(&mut rng, 250, 4.0);
    let mut moe_cfg = small_net(NormKind::Batch);
    moe_cfg.moe.num_experts = 1;
    moe_cfg.moe.top_k = 1;
    let mut dense_cfg = moe_cfg.clone();
    dense_cfg.variant = ModelVariant::Dense;
    let mut moe_model = Model::new(moe_cfg, 17).unwrap();
    let mut dense_model = Model::new(dense_cfg, 17).unwrap();
    for (name, t) in dense_model.params.iter() {
        assert_eq!(moe_model.params.get(name), Some(t), "{name}");
    }
    let batch = voxelize_batch(&[&c], &moe_model.config.voxel).unwrap();
    let (a, _) = forward_eval(&mut moe_model, &batch, None);
    let (b, _) = forward_eval(&mut dense_model, &batch, None);
    assert_eq!(a, b);
}

#[test]
fn token_count_survives_pool_and_unpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let clouds: Vec<PointCloud> = (0..3).map(|_| random_cloud(&mut rng, 150, 3.0)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let mut model = Model::new(small_net(NormKind::Layer), 5).unwrap();
    let batch = voxelize_batch(&refs, &model.config.voxel).unwrap();
    let mut log = RoutingLog::default();
    let (y, _) = forward_eval(&mut model, &batch, Some(&mut log));
    assert_eq!(y.rows(), batch.len());
    assert!(log.level_sizes[1] < log.level_sizes[0]);
    let segs = batch.segments.iter().map(|r| r.len()).sum::<usize>();
    assert_eq!(segs, batch.len());
}

#[test]
fn network_rejects_bad_configs() {
    let mut cfg = small_net(NormKind::Batch);
    cfg.pool_factors = vec![3];
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    let mut cfg = small_net(NormKind::Batch);
    cfg.decoder[0].dim = 16;
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    let mut cfg = small_net(NormKind::Batch);
    cfg.num_heads = 3;
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn conditioned_norm_uses_per_dataset_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let a = random_cloud(&mut rng, 100, 3.0);
    let mut cfg = small_net(NormKind::Batch);
    cfg.variant = ModelVariant::ConditionedNorm;
    cfg.norm_tables = 2;
    let mut model = Model::new(cfg, 6).unwrap();
    assert_eq!(model.params.get("embed.norm.gain").unwrap().shape(), &[2, 8]);
    randomize(&mut model.params, 7);
    let batch = voxelize_batch(&[&a], &model.config.voxel).unwrap();
    let mut outs = Vec::new();
    for table in [0usize, 1] {
        let mut fw = Forward::new(&model.params, &mut model.buffers, false);
        let out = network_forward(&mut fw, &model.config, &batch, Some(&[table]), None).unwrap();
        outs.push(fw.tape.value(out.features).clone());
    }
    assert!(outs[0].max_abs_diff(&outs[1]) > 1e-6);
    let mut fw = Forward::new(&model.params, &mut model.buffers, false);
    assert!(network_forward(&mut fw, &model.config, &batch, None, None).is_err());
}

/// Central-difference check of every parameter of a two-block, D=8, N=2,
/// k=1 network.
#[test]
fn network_gradients_match_finite_differences() {
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
    let mut model = Model::new(cfg, 40).unwrap();
    randomize(&mut model.params, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let c = random_cloud(&mut rng, 12, 1.0);
    let batch = voxelize_batch(&[&c], &model.config.voxel).unwrap();
    let target = random_matrix(&mut rng, batch.len(), 4);

    let loss_of = |params: &ParamStore, grad: bool| -> (f64, f64, Option<Vec<Tensor>>) {
        let mut buffers = model.buffers.clone();
        let mut fw = Forward::new(params, &mut buffers, true);
        let out = network_forward(&mut fw, &model.config, &batch, None, None).unwrap();
        let t = fw.tape.constant(target.clone());
        let prod = fw.tape.mul(out.features, t).unwrap();
        let mut loss = fw.tape.sum(prod);
        if let Some(a) = out.aux_loss {
            loss = fw.tape.add(loss, a).unwrap();
        }
        let value = fw.tape.value(loss).item();
        let grads = grad.then(|| fw.backward(loss).unwrap());
        (value, out.margin, grads)
    };
    let (_, margin, grads) = loss_of(&model.params, true);
    assert!(margin > 1e-3, "router margin {margin} too small to difference");
    let grads = grads.unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut perturbed = model.params.clone();
    for i in 0..perturbed.len() {
        for j in 0..perturbed.at(i).1.numel() {
            let orig = perturbed.at(i).1.data()[j];
            perturbed.at_mut(i).data_mut()[j] = orig + h;
            let (lp, mp, _) = loss_of(&perturbed, false);
            perturbed.at_mut(i).data_mut()[j] = orig - h;
            let (lm, mm, _) = loss_of(&perturbed, false);
            perturbed.at_mut(i).data_mut()[j] = orig;
            assert!(mp > 0.0 && mm > 0.0);
            let num = (lp - lm) / (2.0 * h);
            let ana = grads[i].data()[j];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-5);
            assert!(rel < 1e-4, "{} [{j}]: analytic {ana} numeric {num}", perturbed.at(i).0);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}
