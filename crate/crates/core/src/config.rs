//! Flat `key = value` run configuration with dotted namespaces.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::blocks::{MoePosition, ModelVariant, NetworkConfig, StageConfig, VoxelSettings};
use crate::error::{Error, Result};
use crate::langhead::ClassEmbeddingTable;
use crate::moe::MoEConfig;
use crate::nn::Activation;
use crate::sampler::{BatchMode, BatchPlan};
use crate::syndata::{default_embedding_table, heldout_spec, indoor_spec, outdoor_spec, DatasetSpec};
use crate::tensor::NormKind;
use crate::train::{ClassifierConfig, TrainConfig};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "model init, augmentation and batch sampling seed (PMOE_SEED overrides)"),
    ("model.variant", "point_moe", "point_moe | dense | conditioned_norm"),
    ("model.encoder", "2x32x16,2x64x16", "encoder stages as blocks x dim x window"),
    ("model.decoder", "2x32x16", "decoder stages, shallowest first"),
    ("model.pool_factors", "2", "pool factor per encoder transition"),
    ("model.embed_dim", "32", "token width after embedding"),
    ("model.head_embed_dim", "32", "width of the shared language space"),
    ("model.num_heads", "4", "attention heads"),
    ("model.norm", "batch", "batch | layer | rms"),
    ("model.moe_position", "projection", "projection | ffn | none"),
    ("model.ffn_multiplier", "2.0", "hidden width of dense FFNs as a multiple of dim"),
    ("moe.num_experts", "4", "experts per MoE layer"),
    ("moe.top_k", "2", "experts selected per token"),
    ("moe.expert_hidden_multiplier", "1.0", "expert hidden width as a multiple of dim"),
    ("moe.num_shared_experts", "0", "always-on experts"),
    ("moe.activation", "relu", "relu | silu"),
    ("moe.aux_loss_alpha", "0.0", "load-balancing loss weight"),
    ("voxel.cell_size", "0.25", "voxel edge length in meters"),
    ("voxel.bits_per_axis", "16", "curve-code bits per axis"),
    ("voxel.coord_scale", "4.0", "divisor of voxel-center coordinates"),
    ("train.total_steps", "500", "optimization steps"),
    ("train.lr_max", "0.005", "peak learning rate"),
    ("train.weight_decay", "0.05", "decoupled weight decay"),
    ("train.beta1", "0.9", "AdamW beta1"),
    ("train.beta2", "0.999", "AdamW beta2"),
    ("train.eps", "1e-8", "AdamW epsilon"),
    ("train.warmup_frac", "0.1", "fraction of steps spent warming up"),
    ("train.final_div", "100", "start and final lr are lr_max / final_div"),
    ("train.grad_clip", "1.0", "global gradient-norm clip (0 disables)"),
    ("train.max_tokens", "192", "voxels kept per training crop"),
    ("train.augment", "true", "random rotation, scale and jitter"),
    ("train.logit_scale", "10", "cosine logit scale"),
    ("train.checkpoint_every", "0", "write a checkpoint every K steps (0: final only)"),
    ("batch.mode", "mixed", "mixed | homogeneous"),
    ("batch.size", "4", "scenes per batch"),
    ("batch.weights", "", "comma-separated dataset weights (empty: equal)"),
    ("batch.coverage_floor", "true", "mixed batches hold every dataset"),
    ("data.seed", "0", "scene generation seed"),
    ("data.indoor_scenes", "60", "indoor scenes (every tenth is validation)"),
    ("data.outdoor_scenes", "60", "outdoor scenes"),
    ("data.heldout_scenes", "20", "held-out scenes (never trained on)"),
    ("embed.path", "", "class embedding file (empty: built-in synthetic table)"),
    ("embed.seed", "7", "seed of the synthetic embedding table"),
    ("eval.fragment_voxels", "192", "inference fragment size in voxels (0: whole scene)"),
    ("classifier.max_iters", "5000", "dataset classifier iteration cap"),
    ("classifier.lr", "0.5", "dataset classifier step size"),
    ("classifier.l2", "0.001", "dataset classifier L2 penalty"),
    ("analyze.top_m", "100", "pathways kept in the pathway table"),
    ("analyze.gate_weighted", "false", "use gate-weighted instead of top-1 distributions"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn is_key(k: &str) -> bool {
    KEYS.iter().any(|(key, _, _)| *key == k)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    /// Lines of `key = value`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.apply(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Replaces `seed` with `PMOE_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("PMOE_SEED") {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("PMOE_SEED must be an unsigned integer, got {s:?}")))?;
            self.set("seed", &s)?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid list entry {s:?} for {key}")))
            })
            .collect()
    }

    fn stages(&self, key: &str) -> Result<Vec<StageConfig>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                let p: Vec<usize> = s
                    .trim()
                    .split('x')
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("invalid stage {s:?} for {key} (expected BxDxW)")))?;
                match p[..] {
                    [num_blocks, dim, window_size] => Ok(StageConfig {
                        num_blocks,
                        dim,
                        window_size,
                    }),
                    _ => Err(Error::Config(format!("invalid stage {s:?} for {key} (expected BxDxW)"))),
                }
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn moe(&self) -> Result<MoEConfig> {
        let m = MoEConfig {
            num_experts: self.get("moe.num_experts")?,
            top_k: self.get("moe.top_k")?,
            expert_hidden_multiplier: self.get("moe.expert_hidden_multiplier")?,
            num_shared_experts: self.get("moe.num_shared_experts")?,
            activation: self.get::<Activation>("moe.activation")?,
            aux_loss_alpha: self.get("moe.aux_loss_alpha")?,
        };
        m.validate()?;
        Ok(m)
    }

    /// Network for `training_datasets` training datasets (the
    /// conditioned-norm variant gets one table per dataset).
    pub fn network(&self, training_datasets: usize) -> Result<NetworkConfig> {
        let variant: ModelVariant = self.get("model.variant")?;
        let cfg = NetworkConfig {
            encoder: self.stages("model.encoder")?,
            decoder: self.stages("model.decoder")?,
            pool_factors: self.list("model.pool_factors")?,
            in_features: crate::syndata::NUM_FEATS + 3,
            embed_dim: self.get("model.embed_dim")?,
            head_embed_dim: self.get("model.head_embed_dim")?,
            num_heads: self.get("model.num_heads")?,
            norm_kind: self.get::<NormKind>("model.norm")?,
            moe_position: self.get::<MoePosition>("model.moe_position")?,
            moe: self.moe()?,
            ffn_multiplier: self.get("model.ffn_multiplier")?,
            variant,
            norm_tables: if variant == ModelVariant::ConditionedNorm {
                training_datasets
            } else {
                1
            },
            voxel: VoxelSettings {
                cell_size: self.get("voxel.cell_size")?,
                bits_per_axis: self.get("voxel.bits_per_axis")?,
                coord_scale: self.get("voxel.coord_scale")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr_max: self.get("train.lr_max")?,
            weight_decay: self.get("train.weight_decay")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            eps: self.get("train.eps")?,
            warmup_frac: self.get("train.warmup_frac")?,
            final_div: self.get("train.final_div")?,
            total_steps: self.get("train.total_steps")?,
            grad_clip: self.get("train.grad_clip")?,
            seed: self.seed()?,
            max_tokens: self.get("train.max_tokens")?,
            augment: self.get("train.augment")?,
            logit_scale: self.get("train.logit_scale")?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn plan(&self, datasets: usize) -> Result<BatchPlan> {
        let mut p = BatchPlan::equal(
            self.get::<BatchMode>("batch.mode")?,
            self.get("batch.size")?,
            datasets,
            self.seed()?,
        );
        let w: Vec<f64> = self.list("batch.weights")?;
        if !w.is_empty() {
            p.weights = w;
        }
        p.coverage_floor = self.get("batch.coverage_floor")?;
        p.validate(datasets)?;
        Ok(p)
    }

    /// Indoor, outdoor and held-out specs; datasets with zero scenes are
    /// left out.
    pub fn datasets(&self) -> Result<Vec<DatasetSpec>> {
        let seed: u64 = self.get("data.seed")?;
        let mut out = Vec::new();
        for (mut s, key) in [
            (indoor_spec("indoor", seed), "data.indoor_scenes"),
            (outdoor_spec("outdoor", seed.wrapping_add(1)), "data.outdoor_scenes"),
            (heldout_spec("heldout", seed.wrapping_add(2)), "data.heldout_scenes"),
        ] {
            s.num_scenes = self.get(key)?;
            if s.num_scenes > 0 {
                s.validate()?;
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn embeddings(&self) -> Result<ClassEmbeddingTable> {
        let path = self.raw("embed.path");
        let dim: usize = self.get("model.head_embed_dim")?;
        let table = if path.is_empty() {
            default_embedding_table(dim, self.get("embed.seed")?)?
        } else {
            ClassEmbeddingTable::load(Path::new(path))?
        };
        if table.dim() != dim {
            return Err(Error::Config(format!(
                "embedding dim {} does not match model.head_embed_dim {dim}",
                table.dim()
            )));
        }
        Ok(table)
    }

    pub fn classifier(&self) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            max_iters: self.get("classifier.max_iters")?,
            lr: self.get("classifier.lr")?,
            l2: self.get("classifier.l2")?,
            ..ClassifierConfig::default()
        })
    }

    /// Checks every typed accessor.
    pub fn validate(&self) -> Result<()> {
        let specs = self.datasets()?;
        let training = specs.iter().filter(|s| !s.held_out).count();
        self.network(training)?;
        self.train()?;
        if training > 0 {
            self.plan(training)?;
        }
        self.get::<usize>("train.checkpoint_every")?;
        self.get::<usize>("eval.fragment_voxels")?;
        self.get::<usize>("analyze.top_m")?;
        self.get::<bool>("analyze.gate_weighted")?;
        self.classifier()?;
        Ok(())
    }
}

/// Help text listing every key with its default.
pub fn key_help() -> String {
    let w = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (default in brackets):\n");
    for (k, v, d) in KEYS {
        s.push_str(&format!("  {k:<w$}  [{v}]  {d}\n"));
    }
    s
}
