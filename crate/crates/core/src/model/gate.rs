//! The delete gate: `G = k · σ(RMSNorm(H) W + b)`, bounded in `[k, 0]`.

use rand::Rng;

use super::params::BoundParams;
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::{Error, Result};

/// Gate values for a `[batch × len]` block plus their hard keep/delete decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub batch: usize,
    pub len: usize,
    pub floor: f64,
    /// Row-major `[batch × len]` gate values.
    pub values: Vec<f64>,
    /// `valid && G > k/2`.
    pub keep: Vec<bool>,
    pub kept_count: Vec<usize>,
    pub valid_count: Vec<usize>,
}

impl GateOutput {
    pub fn new(values: Vec<f64>, batch: usize, len: usize, floor: f64, valid: &[bool]) -> Result<Self> {
        if values.len() != batch * len || valid.len() != batch * len {
            return Err(Error::Shape(format!(
                "gate needs {} values and mask entries, got {} and {}",
                batch * len,
                values.len(),
                valid.len()
            )));
        }
        let threshold = floor / 2.0;
        let keep: Vec<bool> = values.iter().zip(valid).map(|(&g, &v)| v && g > threshold).collect();
        let kept_count = keep.chunks(len).map(|r| r.iter().filter(|&&k| k).count()).collect();
        let valid_count = valid.chunks(len).map(|r| r.iter().filter(|&&k| k).count()).collect();
        Ok(Self { batch, len, floor, values, keep, kept_count, valid_count })
    }

    /// All-zero gate: every valid token kept.
    pub fn open(batch: usize, len: usize, floor: f64, valid: &[bool]) -> Result<Self> {
        Self::new(vec![0.0; batch * len], batch, len, floor, valid)
    }

    /// Fraction of valid tokens the hard threshold deletes.
    pub fn deletion_ratio(&self) -> f64 {
        let valid: usize = self.valid_count.iter().sum();
        let kept: usize = self.kept_count.iter().sum();
        if valid == 0 {
            0.0
        } else {
            1.0 - kept as f64 / valid as f64
        }
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.len..(b + 1) * self.len]
    }
}

/// Gumbel noise `-ln(ln u₁ / ln u₂)` for one logit.
pub fn gumbel_noise(u1: f64, u2: f64) -> f64 {
    -((u1.ln()) / (u2.ln())).ln()
}

/// Uniform pairs in the open interval (0, 1) for `n` logits.
pub fn sample_uniform_pairs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<(f64, f64)> {
    let open = |rng: &mut R| loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    };
    (0..n).map(|_| (open(rng), open(rng))).collect()
}

/// Differentiable gate over hidden states `[batch × len × d]`.
///
/// Positions with `valid == false` are forced to `k`. Returns the `[batch × len]`
/// gate var and the realised values.
pub fn delete_gate<T: Float>(
    g: &mut Graph<T>,
    hidden: Var,
    params: &BoundParams,
    floor: f64,
    eps: f64,
    noise: Option<&[(f64, f64)]>,
    valid: &[bool],
) -> Result<(Var, GateOutput)> {
    let shape = g.shape(hidden).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("gate expects [batch, len, d], got {shape:?}")));
    }
    let (batch, len) = (shape[0], shape[1]);
    if valid.len() != batch * len {
        return Err(Error::Shape(format!("valid mask has {} entries for {batch}x{len}", valid.len())));
    }
    if !g.value(hidden).all_finite() {
        return Err(Error::NonFinite("gate input hidden states".into()));
    }
    let normed = g.rms_norm(hidden, params.try_var("gate.norm")?, T::of(eps))?;
    let mut logit = g.matmul(normed, params.try_var("gate.w")?, false)?;
    logit = g.add(logit, params.try_var("gate.b")?)?;
    if let Some(pairs) = noise {
        if pairs.len() != batch * len {
            return Err(Error::Shape(format!("{} noise pairs for {} positions", pairs.len(), batch * len)));
        }
        let n: Vec<f64> = pairs.iter().map(|&(a, b)| gumbel_noise(a, b)).collect();
        let c = g.constant(Tensor::from_f64(vec![batch, len, 1], &n)?);
        logit = g.add(logit, c)?;
    }
    let s = g.sigmoid(logit);
    let mut gate = g.scale(s, T::of(floor));
    gate = g.reshape(gate, &[batch, len])?;
    if valid.iter().any(|v| !v) {
        let keep: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let fill: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { floor }).collect();
        let keep = g.constant(Tensor::from_f64(vec![batch, len], &keep)?);
        let fill = g.constant(Tensor::from_f64(vec![batch, len], &fill)?);
        gate = g.mul(gate, keep)?;
        gate = g.add(gate, fill)?;
    }
    let values = g.value(gate).to_f64_vec();
    let out = GateOutput::new(values, batch, len, floor, valid)?;
    Ok((gate, out))
}
