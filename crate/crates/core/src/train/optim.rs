//! AdamW with decoupled weight decay, a one-cycle schedule and global-norm
//! gradient clipping.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Consistency(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.at_mut(i);
            if p.numel() != g.numel() {
                return Err(Error::dim("adamw", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (upd + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Cosine warmup from `lr_max / final_div` to `lr_max` over the first
/// `warmup_frac` of the run, then cosine decay back to `lr_max / final_div`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config(format!("total_steps must be >= 1, got {}", self.total_steps)));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config("lr_max must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        if !(self.final_div >= 1.0) {
            return Err(Error::Config("final_div must be >= 1".into()));
        }
        Ok(())
    }

    pub fn peak_step(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).round() as usize).min(self.total_steps - 1)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let lo = self.lr_max / self.final_div;
        let peak = self.peak_step();
        let last = self.total_steps - 1;
        let cos_blend = |a: f64, b: f64, t: f64| b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        if step < peak {
            cos_blend(lo, self.lr_max, step as f64 / peak as f64)
        } else {
            let t = ((step - peak) as f64 / (last - peak).max(1) as f64).min(1.0);
            cos_blend(self.lr_max, lo, t)
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to global norm `max_norm` when larger; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}
