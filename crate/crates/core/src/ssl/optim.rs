//! Adam with decoupled weight decay, and per-iteration schedules.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Per-iteration values: linear warmup from 0 to `base`, then a half cosine
/// from `base` to `end`.
pub fn cosine_schedule(base: f64, end: f64, epochs: usize, steps_per_epoch: usize, warmup_epochs: usize) -> Vec<f64> {
    let total = epochs * steps_per_epoch;
    let warm = (warmup_epochs * steps_per_epoch).min(total);
    let mut out = Vec::with_capacity(total);
    for i in 0..warm {
        out.push(base * i as f64 / warm as f64);
    }
    let rest = total - warm;
    for i in 0..rest {
        let t = if rest > 1 { i as f64 / (rest - 1) as f64 } else { 0.0 };
        out.push(end + 0.5 * (base - end) * (1.0 + (PI * t).cos()));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Weight decay applies only to tensors of rank ≥ 2.
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
            decay: params.tensors().iter().map(|t| t.shape().len() >= 2).collect(),
        }
    }

    /// Applies one update given per-parameter gradients (`None` = no gradient
    /// this step; moments still decay).
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let wd = if self.decay[i] { weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].as_ref().map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + wd * *w);
            }
        }
        Ok(())
    }
}

/// Scales each gradient tensor down to an L2 norm of at most `max_norm`.
pub fn clip_per_tensor(grads: &mut [Option<Tensor>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    for g in grads.iter_mut().flatten() {
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = max_norm / (norm + 1e-6);
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
