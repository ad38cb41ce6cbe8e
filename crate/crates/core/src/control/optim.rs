use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::numerics::{Float, Tensor};
use crate::{Error, Result};

/// Learning-rate schedule over `1..=total` optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// `peak·s/warmup` during warmup, then linear decay to zero at `total`.
    LinearWarmupDecay { peak: f64, warmup: usize },
    /// Linear warmup then half-cosine decay to zero.
    Cosine { peak: f64, warmup: usize },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let s = step as f64;
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::LinearWarmupDecay { peak, warmup } | LrSchedule::Cosine { peak, warmup } if step < warmup => {
                peak * s / warmup as f64
            }
            LrSchedule::LinearWarmupDecay { peak, warmup } => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                peak * ((total as f64 - s) / span).clamp(0.0, 1.0)
            }
            LrSchedule::Cosine { peak, warmup } => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let t = ((s - warmup as f64) / span).clamp(0.0, 1.0);
                0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn peak(&self) -> f64 {
        match *self {
            LrSchedule::LinearWarmupDecay { peak, .. } | LrSchedule::Cosine { peak, .. } => peak,
            LrSchedule::Constant { lr } => lr,
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps(), weight_decay: default_wd() }
    }
}

/// AdamW with bias correction; decay is decoupled and applied to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Updates applied so far.
    pub t: u64,
    /// Steps rejected because of non-finite gradients.
    pub skipped: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0, skipped: 0 }
    }

    /// Applies one update; returns `false` (and counts the skip) when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<bool> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            self.skipped += 1;
            log::warn!("non-finite gradient, skipping update {}", self.t + 1);
            return Ok(false);
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let decay = if t.ndim() >= 2 { T::of(1.0 - lr * c.weight_decay) } else { T::one() };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = t.data_mut();
            match &grads[k] {
                Some(g) => {
                    for j in 0..data.len() {
                        m[j] = b1 * m[j] + one_b1 * g[j];
                        v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                        data[j] = data[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..data.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        data[j] = data[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(true)
    }

    /// Moment tensors named `opt.m.<param>` / `opt.v.<param>`.
    pub fn state_tensors(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (k, (name, t)) in params.names().iter().zip(params.tensors()).enumerate() {
            let shape = t.shape().to_vec();
            out.push((format!("opt.m.{name}"), Tensor::new(shape.clone(), self.m[k].clone()).expect("same shape")));
            out.push((format!("opt.v.{name}"), Tensor::new(shape, self.v[k].clone()).expect("same shape")));
        }
        out
    }

    /// Restores moments saved by [`state_tensors`](Self::state_tensors).
    pub fn load_state(&mut self, params: &ParamStore<T>, stored: &[(String, Tensor<T>)], t: u64, skipped: u64) -> Result<()> {
        for (k, (name, p)) in params.names().iter().zip(params.tensors()).enumerate() {
            for (prefix, slot) in [("opt.m.", &mut self.m[k]), ("opt.v.", &mut self.v[k])] {
                let key = format!("{prefix}{name}");
                let (_, saved) = stored
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if saved.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has shape {:?}", saved.shape())));
                }
                slot.copy_from_slice(saved.data());
            }
        }
        self.t = t;
        self.skipped = skipped;
        Ok(())
    }
}
