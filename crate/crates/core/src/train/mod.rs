//! Joint multi-dataset training, evaluation and the baselines' plumbing.

pub mod classifier;
pub mod metrics;
pub mod optim;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{network_forward, voxelize_batch, Model, ModelVariant, RoutingLog, VoxelBatch};
use crate::error::{Error, Result};
use crate::langhead::{class_logits, predict, ClassEmbeddingTable, LabelSpace};
use crate::nn::Forward;
use crate::sampler::{next_batch, BatchPlan};
use crate::syndata::{augment, crop, fragments, Fragment, PointCloud, Registry};
use crate::tensor::{Tensor, Var};

pub use classifier::{descriptor, train_dataset_classifier, ClassifierConfig, DatasetClassifier};
pub use metrics::Confusion;
pub use optim::{clip_grad_norm, global_norm, AdamW, OneCycle};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    /// Start and end learning rate are `lr_max / final_div`.
    pub final_div: f64,
    pub total_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Training crops keep at most this many voxels per scene.
    pub max_tokens: usize,
    pub augment: bool,
    pub logit_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.005,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.1,
            final_div: 100.0,
            total_steps: 500,
            grad_clip: 1.0,
            seed: 0,
            max_tokens: 192,
            augment: true,
            logit_scale: crate::langhead::DEFAULT_LOGIT_SCALE,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            lr_max: self.lr_max,
            total_steps: self.total_steps,
            warmup_frac: self.warmup_frac,
            final_div: self.final_div,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adamw betas must be in [0, 1) and eps > 0".into()));
        }
        if self.max_tokens < 2 {
            return Err(Error::Config("max_tokens must be >= 2".into()));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// One metrics-log record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub aux_loss: f64,
    /// Voxel-level mIoU of the training batch per dataset.
    pub per_dataset: BTreeMap<String, f64>,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub plan: BatchPlan,
    opt: AdamW,
    names: Vec<String>,
    class_mats: Vec<Tensor>,
    pools: Vec<usize>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, plan: BatchPlan, registry: &Registry, table: &ClassEmbeddingTable) -> Result<Self> {
        cfg.validate()?;
        let training = registry.training();
        plan.validate(training.len())?;
        if table.dim() != model.config.head_embed_dim {
            return Err(Error::Config(format!(
                "embedding dim {} does not match head_embed_dim {}",
                table.dim(),
                model.config.head_embed_dim
            )));
        }
        if model.config.variant == ModelVariant::ConditionedNorm && model.config.norm_tables != training.len() {
            return Err(Error::Config(format!(
                "conditioned_norm needs {} norm tables, model has {}",
                training.len(),
                model.config.norm_tables
            )));
        }
        let class_mats = training
            .iter()
            .map(|d| table.class_matrix(&d.spec.label_space))
            .collect::<Result<_>>()?;
        let opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        Ok(Trainer {
            names: training.iter().map(|d| d.spec.name.clone()).collect(),
            pools: training.iter().map(|d| d.train.len()).collect(),
            class_mats,
            model,
            cfg,
            plan,
            opt,
        })
    }

    pub fn dataset_names(&self) -> &[String] {
        &self.names
    }

    /// Augmented, cropped clouds of batch `step` with their dataset indices.
    pub fn batch_clouds(&self, registry: &Registry, step: usize) -> Result<(Vec<PointCloud>, Vec<usize>)> {
        let batch = next_batch(&self.plan, &self.pools, step as u64)?;
        let training = registry.training();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        let mut clouds = Vec::with_capacity(batch.samples.len());
        let mut ds = Vec::with_capacity(batch.samples.len());
        for s in batch.samples {
            let scene = &training[s.dataset].train[s.scene];
            let c = if self.cfg.augment {
                augment(scene, &mut rng)
            } else {
                scene.clone()
            };
            clouds.push(crop(&c, self.model.config.voxel.cell_size, self.cfg.max_tokens, &mut rng)?);
            ds.push(s.dataset);
        }
        Ok((clouds, ds))
    }

    /// One optimization step.
    pub fn step(&mut self, registry: &Registry, step: usize) -> Result<StepLog> {
        let (clouds, ds) = self.batch_clouds(registry, step)?;
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let vb = voxelize_batch(&refs, &self.model.config.voxel)?;
        let conditioned = self.model.config.variant == ModelVariant::ConditionedNorm;
        let seg_table = conditioned.then_some(ds.as_slice());

        let mut fw = Forward::new(&self.model.params, &mut self.model.buffers, true);
        let out = network_forward(&mut fw, &self.model.config, &vb, seg_table, None)?;
        let mut ce: Option<Var> = None;
        let mut conf: Vec<Option<Confusion>> = vec![None; self.names.len()];
        for (i, seg) in vb.segments.iter().enumerate() {
            let d = ds[i];
            let rows = fw.tape.gather_rows(out.features, seg.clone().collect())?;
            let logits = class_logits(&mut fw.tape, rows, &self.class_mats[d], self.cfg.logit_scale)?;
            let labels = &vb.labels[seg.clone()];
            let l = fw.tape.cross_entropy(logits, labels)?;
            ce = Some(match ce {
                Some(acc) => fw.tape.add(acc, l)?,
                None => l,
            });
            let lv = fw.tape.value(logits);
            let preds: Vec<usize> = (0..lv.rows()).map(|r| argmax(lv.row(r))).collect();
            conf[d]
                .get_or_insert_with(|| Confusion::new(self.class_mats[d].cols()))
                .add_all(labels, &preds)?;
        }
        let ce = ce.ok_or_else(|| Error::Input("empty batch".into()))?;
        let aux_value = out.aux_loss.map_or(0.0, |a| fw.tape.value(a).item());
        let total = match out.aux_loss {
            Some(a) => fw.tape.add(ce, a)?,
            None => ce,
        };
        let loss = fw.tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss {loss} (aux {aux_value})"),
            });
        }
        let mut grads = fw.backward(total)?;
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("non-finite gradient of shape {:?}", g.shape()),
            });
        }
        let lr = self.cfg.schedule().lr(step);
        self.opt.update(&mut self.model.params, &grads, lr)?;
        let mut per_dataset = BTreeMap::new();
        for (d, c) in conf.into_iter().enumerate() {
            if let Some(Ok(m)) = c.map(|c| c.miou()) {
                per_dataset.insert(self.names[d].clone(), m);
            }
        }
        Ok(StepLog {
            step,
            loss,
            lr,
            aux_loss: aux_value,
            per_dataset,
        })
    }

    /// Runs steps `[from, total_steps)`, handing every log to `on_step`.
    pub fn run(&mut self, registry: &Registry, from: usize, mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>) -> Result<()> {
        for step in from..self.cfg.total_steps {
            let log = self.step(registry, step)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Eval-mode outputs for one scene.
pub struct SceneOutput {
    pub batch: VoxelBatch,
    /// `T×head_embed_dim`.
    pub features: Tensor,
    pub encoder_out: Tensor,
    pub decoder_out: Tensor,
    pub log: Option<RoutingLog>,
}

/// Eval-mode forward of one scene; `norm_table` selects the normalization
/// table of the conditioned-norm variant.
pub fn infer(model: &Model, cloud: &PointCloud, norm_table: Option<usize>, record: bool) -> Result<SceneOutput> {
    let batch = voxelize_batch(&[cloud], &model.config.voxel)?;
    let mut buffers = model.buffers.clone();
    let mut fw = Forward::new(&model.params, &mut buffers, false);
    let table = match (model.config.variant, norm_table) {
        (ModelVariant::ConditionedNorm, Some(t)) => Some([t]),
        (ModelVariant::ConditionedNorm, None) if model.config.norm_tables > 1 => {
            return Err(Error::Consistency("conditioned_norm inference needs a dataset index".into()))
        }
        _ => None,
    };
    let mut log = record.then(RoutingLog::default);
    let out = network_forward(&mut fw, &model.config, &batch, table.as_ref().map(|t| t.as_slice()), log.as_mut())?;
    Ok(SceneOutput {
        features: fw.tape.value(out.features).clone(),
        encoder_out: fw.tape.value(out.encoder_out.features).clone(),
        decoder_out: fw.tape.value(out.decoder_out).clone(),
        batch,
        log,
    })
}

/// Per-point predictions of one scene in `space`. With `fragment_voxels > 0`
/// the scene is processed in crop-sized fragments.
pub fn predict_points(
    model: &Model,
    cloud: &PointCloud,
    class_matrix: &Tensor,
    scale: f64,
    norm_table: Option<usize>,
    fragment_voxels: usize,
) -> Result<Vec<usize>> {
    let frags = if fragment_voxels == 0 {
        let all: Vec<usize> = (0..cloud.len()).collect();
        vec![Fragment { owned: all.clone(), points: all }]
    } else {
        fragments(cloud, model.config.voxel.cell_size, fragment_voxels)?
    };
    let mut preds = vec![0; cloud.len()];
    for f in &frags {
        let sub = if frags.len() == 1 { cloud.clone() } else { cloud.subset(&f.points) };
        let out = infer(model, &sub, norm_table, false)?;
        let tokens = predict(&out.features, class_matrix, scale)?;
        for &o in &f.owned {
            preds[f.points[o]] = tokens[out.batch.point_token[0][o]];
        }
    }
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub dataset: String,
    pub classes: Vec<String>,
    pub confusion: Confusion,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn from_confusion(dataset: &str, classes: Vec<String>, confusion: Confusion) -> Result<Self> {
        Ok(Metrics {
            dataset: dataset.to_string(),
            iou: confusion.iou(),
            miou: confusion.miou()?,
            accuracy: confusion.accuracy()?,
            classes,
            confusion,
        })
    }
}

/// Point-level metrics over `scenes`, predicting in `space`. `norm_tables`
/// gives each scene's normalization table (conditioned-norm variant only).
pub fn evaluate(
    model: &Model,
    scenes: &[PointCloud],
    space: &LabelSpace,
    table: &ClassEmbeddingTable,
    scale: f64,
    norm_tables: Option<&[usize]>,
    fragment_voxels: usize,
) -> Result<Metrics> {
    let m = table.class_matrix(space)?;
    let mut conf = Confusion::new(space.len());
    for (i, c) in scenes.iter().enumerate() {
        let nt = norm_tables.map(|t| t[i]);
        let preds = predict_points(model, c, &m, scale, nt, fragment_voxels)?;
        conf.add_all(&c.labels, &preds)?;
    }
    Metrics::from_confusion(&space.dataset, space.classes.clone(), conf)
}

/// mIoU of predicting the most frequent ground-truth class of `scenes` for
/// every point.
pub fn prior_baseline_miou(scenes: &[PointCloud], num_classes: usize) -> Result<f64> {
    let mut hist = vec![0u64; num_classes];
    for c in scenes {
        for &l in &c.labels {
            if l >= 0 {
                hist[l as usize] += 1;
            }
        }
    }
    let top = argmax(&hist.iter().map(|&h| h as f64).collect::<Vec<_>>());
    let mut conf = Confusion::new(num_classes);
    for c in scenes {
        for &l in &c.labels {
            conf.add(l, top)?;
        }
    }
    conf.miou()
}

/// Dataset tag per scene, as an `Arc<str>` clone.
pub fn scene_tags(scenes: &[PointCloud]) -> Vec<Option<Arc<str>>> {
    scenes.iter().map(|c| c.dataset_tag.clone()).collect()
}
