use crate::error::{Error, Result};
use crate::moe::{MoEConfig, RoutingRecord};
use crate::nn::{BufferStore, Forward, ParamBuilder, ParamStore};
use crate::tensor::{NormKind, Var};

use super::{
    attention_block, build_block, build_embed, build_pool, build_unpool, embed, pool, unpool,
    BlockConfig, BlockSink, Mixer, MoePosition, TokenState, VoxelBatch, VoxelSettings,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    /// Routed experts; never reads dataset identity.
    PointMoe,
    /// Same network with a single always-on expert at every MoE site.
    Dense,
    /// Dense network with per-dataset normalization gain and bias.
    ConditionedNorm,
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_moe" => Ok(ModelVariant::PointMoe),
            "dense" => Ok(ModelVariant::Dense),
            "conditioned_norm" => Ok(ModelVariant::ConditionedNorm),
            other => Err(Error::Config(format!(
                "unknown model variant {other:?} (expected point_moe, dense or conditioned_norm)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelVariant::PointMoe => "point_moe",
            ModelVariant::Dense => "dense",
            ModelVariant::ConditionedNorm => "conditioned_norm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub window_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Encoder,
    Decoder,
}

impl std::str::FromStr for StageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(StageKind::Encoder),
            "decoder" => Ok(StageKind::Decoder),
            other => Err(Error::Format(format!("unknown stage {other:?}"))),
        }
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageKind::Encoder => "encoder",
            StageKind::Decoder => "decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub encoder: Vec<StageConfig>,
    /// `decoder[l]` runs at level `l` after unpooling from level `l + 1`;
    /// one entry per encoder level except the deepest.
    pub decoder: Vec<StageConfig>,
    /// Pooling factor between encoder level `s` and `s + 1`.
    pub pool_factors: Vec<usize>,
    pub in_features: usize,
    pub embed_dim: usize,
    pub head_embed_dim: usize,
    pub num_heads: usize,
    pub norm_kind: NormKind,
    pub moe_position: MoePosition,
    pub moe: MoEConfig,
    pub ffn_multiplier: f64,
    pub variant: ModelVariant,
    /// Number of normalization tables (datasets) for the conditioned variant.
    pub norm_tables: usize,
    pub voxel: VoxelSettings,
}

impl NetworkConfig {
    /// Desk-scale default: 4 encoder blocks over two levels, 2 decoder blocks.
    pub fn tiny() -> Self {
        NetworkConfig {
            encoder: vec![
                StageConfig {
                    num_blocks: 2,
                    dim: 32,
                    window_size: 16,
                },
                StageConfig {
                    num_blocks: 2,
                    dim: 64,
                    window_size: 16,
                },
            ],
            decoder: vec![StageConfig {
                num_blocks: 2,
                dim: 32,
                window_size: 16,
            }],
            pool_factors: vec![2],
            in_features: 6,
            embed_dim: 32,
            head_embed_dim: 32,
            num_heads: 4,
            norm_kind: NormKind::Batch,
            moe_position: MoePosition::Projection,
            moe: MoEConfig::default(),
            ffn_multiplier: 2.0,
            variant: ModelVariant::PointMoe,
            norm_tables: 1,
            voxel: VoxelSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::Config("network needs at least one encoder stage".into()));
        }
        if self.decoder.len() + 1 != self.encoder.len() {
            return Err(Error::Config(format!(
                "{} encoder stages need {} decoder stages, got {}",
                self.encoder.len(),
                self.encoder.len() - 1,
                self.decoder.len()
            )));
        }
        for (l, d) in self.decoder.iter().enumerate() {
            if d.dim != self.encoder[l].dim {
                return Err(Error::Config(format!(
                    "decoder stage {l} dim {} does not mirror encoder dim {}",
                    d.dim, self.encoder[l].dim
                )));
            }
        }
        if self.pool_factors.len() + 1 != self.encoder.len() {
            return Err(Error::Config("need one pool factor per encoder transition".into()));
        }
        if let Some(f) = self.pool_factors.iter().find(|f| **f < 2 || !f.is_power_of_two()) {
            return Err(Error::Config(format!("pool factor {f} is not a power of two >= 2")));
        }
        if self.embed_dim != self.encoder[0].dim {
            return Err(Error::Config("embed_dim must equal the first encoder dim".into()));
        }
        if self.norm_tables == 0 {
            return Err(Error::Config("norm_tables must be >= 1".into()));
        }
        if self.variant != ModelVariant::ConditionedNorm && self.norm_tables != 1 {
            return Err(Error::Config("only the conditioned_norm variant has several norm tables".into()));
        }
        if self.variant == ModelVariant::PointMoe && self.moe_position == MoePosition::None {
            return Err(Error::Config("point_moe needs moe position projection or ffn".into()));
        }
        let shift_bits: u32 = self.pool_factors.iter().map(|f| 3 * f.trailing_zeros()).sum();
        if shift_bits > 3 * self.voxel.bits_per_axis {
            return Err(Error::Config("pooling removes more bits than the codes have".into()));
        }
        for s in self.encoder.iter().chain(&self.decoder) {
            self.block_config(s).validate()?;
        }
        Ok(())
    }

    pub fn mixer(&self) -> Mixer {
        match self.variant {
            ModelVariant::PointMoe => Mixer::Moe,
            ModelVariant::Dense | ModelVariant::ConditionedNorm => Mixer::DenseExpert,
        }
    }

    pub fn block_config(&self, stage: &StageConfig) -> BlockConfig {
        BlockConfig {
            dim: stage.dim,
            num_heads: self.num_heads,
            window_size: stage.window_size,
            norm_kind: self.norm_kind,
            moe_position: self.moe_position,
            moe: self.moe.clone(),
            ffn_multiplier: self.ffn_multiplier,
            mixer: self.mixer(),
        }
    }

    fn has_moe_layers(&self) -> bool {
        self.mixer() == Mixer::Moe && self.moe_position != MoePosition::None
    }

    /// Every block in forward order: `(param prefix, stage kind, level, dim)`.
    pub fn blocks(&self) -> Vec<(String, StageKind, usize, usize)> {
        let mut out = Vec::new();
        for (s, st) in self.encoder.iter().enumerate() {
            for b in 0..st.num_blocks {
                out.push((format!("enc{s}.block{b}"), StageKind::Encoder, s, st.dim));
            }
        }
        for (l, st) in self.decoder.iter().enumerate().rev() {
            for b in 0..st.num_blocks {
                out.push((format!("dec{l}.block{b}"), StageKind::Decoder, l, st.dim));
            }
        }
        out
    }

    /// MoE layers in forward order; empty for the dense variants.
    pub fn moe_layers(&self) -> Vec<LayerInfo> {
        if !self.has_moe_layers() {
            return Vec::new();
        }
        self.blocks()
            .into_iter()
            .enumerate()
            .map(|(i, (name, stage, level, dim))| LayerInfo {
                layer_id: i,
                stage,
                level,
                dim,
                name,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub layer_id: usize,
    pub stage: StageKind,
    pub level: usize,
    pub dim: usize,
    pub name: String,
}

/// Routing records of one forward pass plus the lineage needed to follow a
/// finest-level token through pooling.
#[derive(Clone, Debug, Default)]
pub struct RoutingLog {
    pub records: Vec<RoutingRecord>,
    pub layers: Vec<LayerInfo>,
    /// `parent_maps[l][i]`: token at level `l + 1` containing token `i` of level `l`.
    pub parent_maps: Vec<Vec<usize>>,
    /// Token count per level.
    pub level_sizes: Vec<usize>,
}

/// Parameters and running statistics of one network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub buffers: BufferStore,
}

impl Model {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        {
            let mut b = ParamBuilder {
                store: &mut params,
                buffers: &mut buffers,
                seed,
            };
            let c = &config;
            let tables = c.norm_tables;
            build_embed(&mut b, c.in_features, c.embed_dim, c.norm_kind, tables)?;
            for (s, st) in c.encoder.iter().enumerate() {
                if s > 0 {
                    build_pool(&mut b, &format!("pool{s}"), c.encoder[s - 1].dim, st.dim, c.norm_kind, tables)?;
                }
                for blk in 0..st.num_blocks {
                    build_block(&mut b, &format!("enc{s}.block{blk}"), &c.block_config(st), tables)?;
                }
            }
            for (l, st) in c.decoder.iter().enumerate().rev() {
                let coarse_dim = c.encoder[l + 1].dim;
                build_unpool(&mut b, &format!("dec{l}.unpool"), coarse_dim, st.dim, c.norm_kind, tables)?;
                for blk in 0..st.num_blocks {
                    build_block(&mut b, &format!("dec{l}.block{blk}"), &c.block_config(st), tables)?;
                }
            }
            b.linear("head.fc", c.encoder[0].dim, c.head_embed_dim, true)?;
        }
        Ok(Model {
            config,
            params,
            buffers,
        })
    }
}

pub struct NetworkOutput {
    /// `T×head_embed_dim`, one row per embedded token.
    pub features: Var,
    /// Fine-level features before the head.
    pub decoder_out: Var,
    /// Tokens at the deepest encoder level.
    pub encoder_out: TokenState,
    /// Sum of the balancing losses of all MoE layers (when `α > 0`).
    pub aux_loss: Option<Var>,
    pub labels: Vec<i64>,
    /// Smallest top-k logit margin seen in any MoE layer.
    pub margin: f64,
}

/// embed → encoder stages (pool between levels) → decoder stages (unpool
/// with skip fusion) → linear head.
///
/// `segment_table` gives the normalization table of every scene; only the
/// conditioned-norm variant reads it.
pub fn network_forward(
    fw: &mut Forward<'_>,
    cfg: &NetworkConfig,
    batch: &VoxelBatch,
    segment_table: Option<&[usize]>,
    mut log: Option<&mut RoutingLog>,
) -> Result<NetworkOutput> {
    cfg.validate()?;
    if batch.inputs.cols() != cfg.in_features {
        return Err(Error::dim(
            "network_forward",
            format!("batch has {} input features, network expects {}", batch.inputs.cols(), cfg.in_features),
        ));
    }
    let table = match cfg.variant {
        ModelVariant::ConditionedNorm if cfg.norm_tables > 1 => {
            let t = segment_table.ok_or_else(|| {
                Error::Consistency("conditioned_norm needs a dataset index per scene".into())
            })?;
            if t.len() != batch.segments.len() || t.iter().any(|&i| i >= cfg.norm_tables) {
                return Err(Error::Consistency("dataset index table does not match the batch".into()));
            }
            Some(t)
        }
        _ => None,
    };
    let act = cfg.moe.activation;
    let moe_layers = cfg.has_moe_layers();
    if let Some(l) = log.as_deref_mut() {
        l.layers = cfg.moe_layers();
        l.parent_maps.clear();
        l.level_sizes.clear();
    }

    let mut state = embed(fw, batch, cfg.norm_kind, act, table)?;
    let labels = state.labels.clone();
    let mut margin = f64::INFINITY;
    let mut aux: Option<Var> = None;
    let mut layer_id = 0usize;
    let mut skips: Vec<TokenState> = Vec::new();

    let mut run_block = |fw: &mut Forward<'_>,
                         state: &TokenState,
                         prefix: String,
                         st: &StageConfig,
                         log: &mut Option<&mut RoutingLog>|
     -> Result<TokenState> {
        let sink = match (moe_layers, log.as_deref_mut()) {
            (true, Some(l)) => Some(BlockSink {
                records: &mut l.records,
                layer_id,
            }),
            _ => None,
        };
        let (next, baux) = attention_block(fw, state, &prefix, &cfg.block_config(st), sink)?;
        margin = margin.min(baux.margin);
        if let Some(a) = baux.aux_loss {
            aux = Some(match aux {
                Some(acc) => fw.tape.add(acc, a)?,
                None => a,
            });
        }
        if moe_layers {
            layer_id += 1;
        }
        Ok(next)
    };

    for (s, st) in cfg.encoder.iter().enumerate() {
        if s > 0 {
            let coarse = pool(fw, &mut state, &format!("pool{s}"), cfg.pool_factors[s - 1], cfg.norm_kind, table)?;
            if let Some(l) = log.as_deref_mut() {
                l.level_sizes.push(state.len());
                l.parent_maps.push(state.parent_map.clone().expect("pool sets the parent map"));
            }
            skips.push(std::mem::replace(&mut state, coarse));
        }
        for b in 0..st.num_blocks {
            state = run_block(fw, &state, format!("enc{s}.block{b}"), st, &mut log)?;
        }
    }
    if let Some(l) = log.as_deref_mut() {
        l.level_sizes.push(state.len());
    }
    let encoder_out = state.clone();
    for (l, st) in cfg.decoder.iter().enumerate().rev() {
        let skip = skips.pop().expect("one skip per decoder stage");
        state = unpool(fw, &state, &skip, &format!("dec{l}.unpool"), cfg.norm_kind, act)?;
        for b in 0..st.num_blocks {
            state = run_block(fw, &state, format!("dec{l}.block{b}"), st, &mut log)?;
        }
    }
    let decoder_out = state.features;
    let features = fw.linear(decoder_out, "head.fc")?;
    Ok(NetworkOutput {
        features,
        decoder_out,
        encoder_out,
        aux_loss: aux,
        labels,
        margin,
    })
}
