//! Batch assembly for joint multi-dataset training.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Every batch draws from several datasets.
    Mixed,
    /// Every batch comes from one dataset.
    Homogeneous,
}

impl std::str::FromStr for BatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(BatchMode::Mixed),
            "homogeneous" => Ok(BatchMode::Homogeneous),
            other => Err(Error::Config(format!("unknown batch mode {other:?} (expected mixed or homogeneous)"))),
        }
    }
}

impl std::fmt::Display for BatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BatchMode::Mixed => "mixed",
            BatchMode::Homogeneous => "homogeneous",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub mode: BatchMode,
    pub batch_size: usize,
    /// Sampling proportion per dataset; normalized on use.
    pub weights: Vec<f64>,
    pub seed: u64,
    /// Mixed mode only: reserve one slot per dataset in every batch.
    pub coverage_floor: bool,
}

impl BatchPlan {
    pub fn equal(mode: BatchMode, batch_size: usize, datasets: usize, seed: u64) -> Self {
        BatchPlan {
            mode,
            batch_size,
            weights: vec![1.0; datasets],
            seed,
            coverage_floor: true,
        }
    }

    pub fn validate(&self, datasets: usize) -> Result<()> {
        if datasets == 0 {
            return Err(Error::Plan("no datasets to sample from".into()));
        }
        if self.weights.len() != datasets {
            return Err(Error::Plan(format!(
                "{} weights for {datasets} datasets",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Plan("dataset weights must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Plan("batch_size must be >= 1".into()));
        }
        if self.mode == BatchMode::Mixed && self.coverage_floor && self.batch_size < datasets {
            return Err(Error::Plan(format!(
                "mixed batches of {} cannot cover {datasets} datasets",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One sample: dataset index and scene index within its training pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub dataset: usize,
    pub scene: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub samples: Vec<SampleRef>,
    /// How many leading samples are coverage slots (not weighted draws).
    pub floor_slots: usize,
}

/// Batch for `step`; a pure function of `(plan, pool_sizes, step)`.
pub fn next_batch(plan: &BatchPlan, pool_sizes: &[usize], step: u64) -> Result<Batch> {
    plan.validate(pool_sizes.len())?;
    if let Some(d) = pool_sizes.iter().position(|&n| n == 0) {
        return Err(Error::Plan(format!("dataset {d} has no training scenes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(step);
    let weights = WeightedIndex::new(&plan.weights).map_err(|e| Error::Plan(e.to_string()))?;
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); pool_sizes.len()];
    let mut draw = |d: usize, rng: &mut ChaCha8Rng| {
        let n = pool_sizes[d];
        if used[d].len() >= n {
            used[d].clear();
        }
        let free = n - used[d].len();
        let mut k = rng.gen_range(0..free);
        let mut scene = 0;
        for s in 0..n {
            if !used[d].contains(&s) {
                if k == 0 {
                    scene = s;
                    break;
                }
                k -= 1;
            }
        }
        used[d].push(scene);
        SampleRef { dataset: d, scene }
    };
    let mut samples = Vec::with_capacity(plan.batch_size);
    let mut floor_slots = 0;
    match plan.mode {
        BatchMode::Mixed => {
            if plan.coverage_floor {
                for d in 0..pool_sizes.len() {
                    samples.push(draw(d, &mut rng));
                }
                floor_slots = pool_sizes.len();
            }
            while samples.len() < plan.batch_size {
                let d = weights.sample(&mut rng);
                samples.push(draw(d, &mut rng));
            }
        }
        BatchMode::Homogeneous => {
            let d = weights.sample(&mut rng);
            for _ in 0..plan.batch_size {
                samples.push(draw(d, &mut rng));
            }
        }
    }
    Ok(Batch { samples, floor_slots })
}
