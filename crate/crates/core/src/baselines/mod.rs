//! Comparison reducers: random and fixed deletion gates, boundary-predictor
//! mean pooling and strided convolutional pooling.

use rand::seq::index::sample;
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::data::{byte_of, example_rng};
use crate::model::{BoundParams, Compacted, GateOutput};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::{Error, Result};

/// Deletes exactly `round(rate · n_valid)` uniformly chosen valid positions per sequence.
pub fn random_gate(valid: &[bool], batch: usize, len: usize, rate: f64, floor: f64, seed: u64) -> Result<GateOutput> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!("deletion rate must be in [0,1], got {rate}")));
    }
    if valid.len() != batch * len {
        return Err(Error::Shape(format!("{} mask entries for {batch}x{len}", valid.len())));
    }
    let mut values: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { floor }).collect();
    for b in 0..batch {
        let idx: Vec<usize> = (0..len).filter(|&i| valid[b * len + i]).collect();
        let n_del = (rate * idx.len() as f64).round() as usize;
        let mut rng = example_rng(seed, b as u64);
        for j in sample(&mut rng, idx.len(), n_del) {
            values[b * len + idx[j]] = floor;
        }
    }
    GateOutput::new(values, batch, len, floor, valid)
}

/// Whitespace, ASCII punctuation and symbols.
pub const SEPARATORS: &[u8] = b"\t\n !\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// True for separator bytes and for every non-byte id (eos, bos, pad, sentinels).
pub fn is_separator(id: usize) -> bool {
    match byte_of(id) {
        Some(b) => SEPARATORS.contains(&b),
        None => true,
    }
}

/// Deletes the final `floor(rate · L)` tokens of every word of length `L`.
pub fn fixed_gate(ids: &[usize], valid: &[bool], batch: usize, len: usize, rate: f64, floor: f64) -> Result<GateOutput> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!("deletion rate must be in [0,1], got {rate}")));
    }
    if ids.len() != batch * len || valid.len() != batch * len {
        return Err(Error::Shape(format!("ids/mask must hold {batch}x{len} entries")));
    }
    let mut values: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { floor }).collect();
    for b in 0..batch {
        let row = b * len;
        let mut i = 0;
        while i < len {
            if !valid[row + i] || is_separator(ids[row + i]) {
                i += 1;
                continue;
            }
            let start = i;
            while i < len && valid[row + i] && !is_separator(ids[row + i]) {
                i += 1;
            }
            let word = i - start;
            let n_del = (rate * word as f64 + 1e-9).floor() as usize;
            for v in &mut values[row + i - n_del..row + i] {
                *v = floor;
            }
        }
    }
    GateOutput::new(values, batch, len, floor, valid)
}

/// Boundary bits over a valid region of `n` tokens and the induced segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentAssignment {
    /// `bits[t] = 1` places a boundary between tokens `t` and `t+1`; length `n-1`.
    pub bits: Vec<u8>,
    /// Segment of each valid token.
    pub segment: Vec<usize>,
    pub n_segments: usize,
}

impl SegmentAssignment {
    pub fn from_bits(bits: Vec<u8>) -> Self {
        let mut segment = vec![0];
        for &b in &bits {
            let last = *segment.last().expect("non-empty");
            segment.push(last + b as usize);
        }
        let n_segments = segment.last().expect("non-empty") + 1;
        Self { bits, segment, n_segments }
    }

    /// One-hot assignment matrix `[n × S]`.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        self.segment
            .iter()
            .map(|&s| (0..self.n_segments).map(|j| u8::from(j == s)).collect())
            .collect()
    }

    /// First token of every segment.
    pub fn first_indices(&self) -> Vec<usize> {
        let mut out = vec![0];
        out.extend(self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(t, _)| t + 1));
        out
    }
}

fn valid_prefix(valid: &[bool], batch: usize, len: usize) -> Result<Vec<usize>> {
    (0..batch)
        .map(|b| {
            let row = &valid[b * len..(b + 1) * len];
            let n = row.iter().take_while(|&&v| v).count();
            if n == 0 {
                Err(Error::Empty(format!("sequence {b} has no valid tokens")))
            } else if row[n..].iter().any(|&v| v) {
                Err(Error::Invalid(format!("sequence {b}: padding must be a suffix")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Output of [`boundary_predict_pool`].
pub struct BoundaryPooling {
    pub compacted: Compacted,
    pub assignments: Vec<SegmentAssignment>,
    /// Straight-through boundary values `[batch × len]`; zero at and beyond the last valid token.
    pub boundary_vars: Var,
    /// Boundary probabilities `b̂` as plain numbers.
    pub probabilities: Vec<f64>,
}

/// Mean-pools `hidden` (`[batch × len × d]`) into segments chosen by a
/// Gumbel-sigmoid boundary predictor.
pub fn boundary_predict_pool<T: Float>(
    g: &mut Graph<T>,
    hidden: Var,
    p: &BoundParams,
    valid: &[bool],
    tau: f64,
    training: bool,
    seed: u64,
) -> Result<BoundaryPooling> {
    let shape = g.shape(hidden).to_vec();
    let (batch, len, d) = (shape[0], shape[1], shape[2]);
    let n_valid = valid_prefix(valid, batch, len)?;
    let h = g.matmul(hidden, p.try_var("bp.w1")?, false)?;
    let h = g.add(h, p.try_var("bp.b1")?)?;
    let h = g.relu(h);
    let logit = g.matmul(h, p.try_var("bp.w2")?, false)?;
    let logit = g.add(logit, p.try_var("bp.b2")?)?;
    let logit = g.reshape(logit, &[batch, len])?;
    let bhat = g.sigmoid(logit);
    let logits = g.value(logit).to_f64_vec();
    let probabilities = g.value(bhat).to_f64_vec();
    let mut rng = example_rng(seed ^ 0xbb67_ae85_84ca_a73b, 0);
    let mut hard = vec![T::zero(); batch * len];
    let mut assignments = Vec::with_capacity(batch);
    for b in 0..batch {
        let n = n_valid[b];
        let mut bits = Vec::with_capacity(n - 1);
        for t in 0..n - 1 {
            let x = logits[b * len + t];
            let on = if training {
                let u: f64 = loop {
                    let u: f64 = rng.random();
                    if u > 0.0 && u < 1.0 {
                        break u;
                    }
                };
                let relaxed = 1.0 / (1.0 + (-(x + (u / (1.0 - u)).ln()) / tau).exp());
                relaxed > 0.5
            } else {
                probabilities[b * len + t] > 0.5
            };
            bits.push(u8::from(on));
            hard[b * len + t] = if on { T::one() } else { T::zero() };
        }
        assignments.push(SegmentAssignment::from_bits(bits));
    }
    let boundary_vars = g.straight_through(bhat, hard)?;
    let s_max = assignments.iter().map(|a| a.n_segments).max().unwrap_or(1);
    let mut segment = vec![None; batch * len];
    let mut positions = vec![0; batch * s_max];
    let mut pooled_valid = vec![false; batch * s_max];
    let mut kept_index = Vec::with_capacity(batch);
    for (b, a) in assignments.iter().enumerate() {
        for (t, &s) in a.segment.iter().enumerate() {
            segment[b * len + t] = Some(b * s_max + s);
        }
        let first = a.first_indices();
        for (j, &f) in first.iter().enumerate() {
            positions[b * s_max + j] = f;
            pooled_valid[b * s_max + j] = true;
        }
        kept_index.push(first);
    }
    let flat = g.reshape(hidden, &[batch * len, d])?;
    let pooled = g.segment_mean(flat, segment, batch * s_max, &[batch, s_max, d])?;
    let compacted = Compacted {
        hidden: pooled,
        batch,
        len: s_max,
        valid: pooled_valid,
        positions,
        kept_index,
        rescued: 0,
    };
    Ok(BoundaryPooling { compacted, assignments, boundary_vars, probabilities })
}

/// `-ln Binomial(k; n, p) / n`.
pub fn binomial_nll(k: f64, n: usize, p: f64) -> f64 {
    let nf = n as f64;
    -(ln_gamma(nf + 1.0) - ln_gamma(k + 1.0) - ln_gamma(nf - k + 1.0) + k * p.ln() + (nf - k) * (1.0 - p).ln()) / nf
}

/// Mean over sequences of the length-normalised binomial NLL of the boundary count.
pub fn binomial_prior_loss<T: Float>(
    g: &mut Graph<T>,
    boundary_vars: Var,
    assignments: &[SegmentAssignment],
    prior_p: f64,
) -> Result<Var> {
    let shape = g.shape(boundary_vars).to_vec();
    let len = shape[shape.len() - 1];
    let mut total: Option<Var> = None;
    let mut terms = 0;
    for (b, a) in assignments.iter().enumerate() {
        let n = a.bits.len();
        if n == 0 {
            continue;
        }
        let mut w = vec![T::zero(); g.value(boundary_vars).numel()];
        for t in 0..n {
            w[b * len + t] = T::one();
        }
        let count = g.weighted_sum(boundary_vars, w)?;
        let nll = g.binomial_nll(count, n, prior_p)?;
        total = Some(match total {
            Some(acc) => g.add(acc, nll)?,
            None => nll,
        });
        terms += 1;
    }
    match total {
        Some(t) => Ok(g.scale(t, T::of(1.0 / terms as f64))),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

/// Strided 1-D convolution over sequence positions with explicit weights
/// `w: [width·d × d]` and `bias: [d]`. Windows start at multiples of `stride`
/// up to the last valid token; taps past it read zeros.
pub fn conv_pool_with<T: Float>(
    g: &mut Graph<T>,
    hidden: Var,
    w: Var,
    bias: Var,
    valid: &[bool],
    stride: usize,
    width: usize,
) -> Result<Compacted> {
    if stride == 0 || width == 0 {
        return Err(Error::Invalid("conv pooling needs positive stride and width".into()));
    }
    let shape = g.shape(hidden).to_vec();
    let (batch, len, d) = (shape[0], shape[1], shape[2]);
    let n_valid = valid_prefix(valid, batch, len)?;
    let windows: Vec<usize> = n_valid.iter().map(|&n| n.div_ceil(stride)).collect();
    let s_max = *windows.iter().max().expect("batch is non-empty");
    let mut rows = Vec::with_capacity(batch * s_max * width);
    let mut positions = vec![0; batch * s_max];
    let mut out_valid = vec![false; batch * s_max];
    let mut kept_index = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut firsts = Vec::with_capacity(windows[b]);
        for j in 0..s_max {
            let start = j * stride;
            for t in 0..width {
                let pos = start + t;
                rows.push((j < windows[b] && pos < n_valid[b]).then_some(b * len + pos));
            }
            if j < windows[b] {
                positions[b * s_max + j] = start;
                out_valid[b * s_max + j] = true;
                firsts.push(start);
            }
        }
        kept_index.push(firsts);
    }
    let flat = g.reshape(hidden, &[batch * len, d])?;
    let n_rows = rows.len();
    let cols = g.gather_rows(flat, rows, &[n_rows, d])?;
    let cols = g.reshape(cols, &[batch, s_max, width * d])?;
    let y = g.matmul(cols, w, false)?;
    let y = g.add(y, bias)?;
    Ok(Compacted { hidden: y, batch, len: s_max, valid: out_valid, positions, kept_index, rescued: 0 })
}

/// Convolutional pooling with the model's `cp.w`/`cp.b` parameters.
pub fn conv_pool<T: Float>(
    g: &mut Graph<T>,
    hidden: Var,
    p: &BoundParams,
    valid: &[bool],
    stride: usize,
    width: usize,
) -> Result<Compacted> {
    conv_pool_with(g, hidden, p.try_var("cp.w")?, p.try_var("cp.b")?, valid, stride, width)
}
