//! Encoder and decoder stacks.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Baseline, DeletionMode, ModelConfig};
use super::deletion::{hard_delete, Compacted};
use super::gate::{delete_gate, sample_uniform_pairs, GateOutput};
use super::params::BoundParams;
use super::position::bucket_matrix;
use crate::baselines;
use crate::data::BOS_ID;
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::{Error, Result};

/// Additive logit used to mask padding.
pub const MASK_VALUE: f64 = -1e9;

/// Token-id batch for one encoder-decoder step, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub enc_len: usize,
    pub enc_ids: Vec<usize>,
    pub enc_valid: Vec<bool>,
    pub dec_len: usize,
    pub dec_ids: Vec<usize>,
    /// `None` marks positions excluded from the loss.
    pub dec_targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let (b, n, m) = (self.batch, self.enc_len, self.dec_len);
        if b == 0 || n == 0 || m == 0 {
            return Err(Error::Empty("batch dimensions must be positive".into()));
        }
        if self.enc_ids.len() != b * n || self.enc_valid.len() != b * n {
            return Err(Error::Shape(format!("encoder ids/mask must hold {b}x{n} entries")));
        }
        if self.dec_ids.len() != b * m || self.dec_targets.len() != b * m {
            return Err(Error::Shape(format!("decoder ids/targets must hold {b}x{m} entries")));
        }
        let bad = self.enc_ids.iter().chain(&self.dec_ids).chain(self.dec_targets.iter().flatten()).find(|&&i| i >= vocab_size);
        if let Some(i) = bad {
            return Err(Error::Invalid(format!("token id {i} outside vocabulary of {vocab_size}")));
        }
        if let Some(r) = self.enc_valid.chunks(n).position(|row| !row.iter().any(|&v| v)) {
            return Err(Error::Empty(format!("encoder row {r} has no valid tokens")));
        }
        Ok(())
    }
}

/// Per-call switches for a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: DeletionMode,
    /// Enables Gumbel gate noise (when configured) and boundary sampling.
    pub training: bool,
    /// Seeds every stochastic choice made during the pass.
    pub seed: u64,
    /// Record the scaled attention scores used by the score regularizer.
    pub collect_scores: bool,
    /// Replaces the computed gate with fixed `[batch × len]` values.
    pub gate_override: Option<Vec<f64>>,
}

impl ForwardOptions {
    pub fn new(mode: DeletionMode) -> Self {
        Self { mode, training: false, seed: 0, collect_scores: false, gate_override: None }
    }

    pub fn training(mode: DeletionMode, seed: u64) -> Self {
        Self { mode, training: true, seed, collect_scores: true, gate_override: None }
    }
}

/// Per-batch reduction statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderStats {
    pub kept: Vec<usize>,
    pub valid: Vec<usize>,
    /// Wall-clock of the encoder layers after the gate layer, compaction included.
    pub post_gate_time: Duration,
    pub rescued: usize,
    pub bos_deleted: usize,
}

impl EncoderStats {
    /// Fraction of valid tokens removed.
    pub fn reduction(&self) -> f64 {
        let valid: usize = self.valid.iter().sum();
        let kept: usize = self.kept.iter().sum();
        if valid == 0 {
            0.0
        } else {
            1.0 - kept as f64 / valid as f64
        }
    }
}

pub struct EncoderOutput {
    /// Final-normed hidden states `[batch × memory_len × d]`.
    pub memory: Var,
    pub memory_len: usize,
    pub memory_valid: Vec<bool>,
    /// Soft-mode gate reshaped to `[batch, 1, 1, len]` for cross-attention.
    pub cross_gate: Option<Var>,
    pub gate: Option<GateOutput>,
    pub gate_var: Option<Var>,
    /// Scaled scores of the encoder layers from the gate layer on.
    pub score_vars: Vec<Var>,
    /// Auxiliary reducer loss (boundary prior), already weighted.
    pub aux_loss: Option<Var>,
    /// Original positions behind each memory row, when the sequence was shortened.
    pub kept_index: Option<Vec<Vec<usize>>>,
    pub stats: EncoderStats,
}

/// `[batch, 1, 1, len]` additive mask: 0 on valid positions, a large negative on pads.
pub fn additive_mask<T: Float>(valid: &[bool], batch: usize, len: usize) -> Tensor<T> {
    let m: Vec<T> = valid.iter().map(|&v| if v { T::zero() } else { T::of(MASK_VALUE) }).collect();
    Tensor::new(vec![batch, 1, 1, len], m).expect("mask shape matches by construction")
}

fn attention<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    xq: Var,
    xkv: Var,
    adds: &[Var],
) -> Result<(Var, Var)> {
    let (h, dh) = (cfg.n_heads, cfg.d_head);
    let sq = g.shape(xq).to_vec();
    let (b, nq, d) = (sq[0], sq[1], sq[2]);
    let nk = g.shape(xkv)[1];
    let heads = |g: &mut Graph<T>, x: Var, w: &str, n: usize| -> Result<Var> {
        let y = g.matmul(x, p.try_var(&format!("{prefix}.{w}"))?, false)?;
        let y = g.reshape(y, &[b, n, h, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = heads(g, xq, "q", nq)?;
    let k = heads(g, xkv, "k", nk)?;
    let v = heads(g, xkv, "v", nk)?;
    let raw = g.matmul(q, k, true)?;
    let scores = g.scale(raw, T::of(1.0 / (dh as f64).sqrt()));
    let mut logits = scores;
    for &a in adds {
        logits = g.add(logits, a)?;
    }
    let probs = g.softmax_one(logits);
    let o = g.matmul(probs, v, false)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, nq, d])?;
    let out = g.matmul(o, p.try_var(&format!("{prefix}.o"))?, false)?;
    Ok((out, scores))
}

fn feed_forward<T: Float>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, pre: &str, x: Var) -> Result<Var> {
    let h = g.rms_norm(x, p.try_var(&format!("{pre}.ff_norm"))?, T::of(cfg.norm_eps))?;
    let u = g.matmul(h, p.try_var(&format!("{pre}.wi"))?, false)?;
    let u = g.relu(u);
    let o = g.matmul(u, p.try_var(&format!("{pre}.wo"))?, false)?;
    g.add(x, o)
}

fn encoder_layer<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    l: usize,
    x: Var,
    adds: &[Var],
) -> Result<(Var, Var)> {
    let pre = format!("encoder.{l}");
    let h = g.rms_norm(x, p.try_var(&format!("{pre}.attn_norm"))?, T::of(cfg.norm_eps))?;
    let (a, s) = attention(g, p, cfg, &format!("{pre}.attn"), h, h, adds)?;
    let x = g.add(x, a)?;
    Ok((feed_forward(g, p, cfg, &pre, x)?, s))
}

/// Encoder bias `[1, H, n, n]` over contiguous positions.
fn contiguous_bias<T: Float>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, n: usize) -> Result<Var> {
    let pos: Vec<usize> = (0..n).collect();
    let buckets = bucket_matrix(&pos, &pos, true, cfg.n_buckets, cfg.max_distance);
    g.bias_gather(p.try_var("encoder.rel_bias")?, buckets, 1, n, n)
}

/// Encoder bias `[B, H, n, n]` from per-row original positions.
fn positional_bias<T: Float>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, c: &Compacted) -> Result<Var> {
    let n = c.len;
    let mut buckets = Vec::with_capacity(c.batch * n * n);
    for pos in c.positions.chunks(n) {
        buckets.extend(bucket_matrix(pos, pos, true, cfg.n_buckets, cfg.max_distance));
    }
    g.bias_gather(p.try_var("encoder.rel_bias")?, buckets, c.batch, n, n)
}

enum Reduction {
    Plain,
    Soft(Var),
    Compact(Compacted),
}

fn gated_output(cfg: &ModelConfig, batch: &Batch, opts: &ForwardOptions) -> Result<Option<GateOutput>> {
    let (b, n, k) = (batch.batch, batch.enc_len, cfg.gate_floor);
    if let Some(values) = &opts.gate_override {
        let forced: Vec<f64> =
            values.iter().zip(&batch.enc_valid).map(|(&v, &ok)| if ok { v.clamp(k, 0.0) } else { k }).collect();
        return GateOutput::new(forced, b, n, k, &batch.enc_valid).map(Some);
    }
    match cfg.baseline {
        Baseline::Random { rate } => baselines::random_gate(&batch.enc_valid, b, n, rate, k, opts.seed).map(Some),
        Baseline::Fixed { rate } => baselines::fixed_gate(&batch.enc_ids, &batch.enc_valid, b, n, rate, k).map(Some),
        _ => Ok(None),
    }
}

/// Runs the encoder, applying the configured reducer after the gate layer.
pub fn encoder_forward<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    opts: &ForwardOptions,
) -> Result<EncoderOutput> {
    batch.validate(cfg.vocab_size)?;
    let (bsz, n) = (batch.batch, batch.enc_len);
    let mut x = g.embedding(p.try_var("shared.embed")?, &batch.enc_ids, &[bsz, n])?;
    let pad = g.constant(additive_mask(&batch.enc_valid, bsz, n));
    let bias = contiguous_bias(g, p, cfg, n)?;
    let mut score_vars = Vec::new();
    for l in 0..cfg.gate_layer {
        let (y, s) = encoder_layer(g, p, cfg, l, x, &[bias, pad])?;
        if opts.collect_scores && l + 1 == cfg.gate_layer {
            score_vars.push(s);
        }
        x = y;
    }
    let valid_counts: Vec<usize> = batch.enc_valid.chunks(n).map(|r| r.iter().filter(|&&v| v).count()).collect();
    let mut stats = EncoderStats { kept: valid_counts.clone(), valid: valid_counts, ..Default::default() };
    let mut gate = None;
    let mut gate_var = None;
    let mut aux_loss = None;
    let start = Instant::now();
    let reduction = if opts.mode == DeletionMode::None {
        Reduction::Plain
    } else {
        match &cfg.baseline {
            Baseline::Bp { prior_p, tau, prior_weight } => {
                let pooled = baselines::boundary_predict_pool(
                    g,
                    x,
                    p,
                    &batch.enc_valid,
                    *tau,
                    opts.training,
                    opts.seed,
                )?;
                let prior = baselines::binomial_prior_loss(g, pooled.boundary_vars, &pooled.assignments, *prior_p)?;
                aux_loss = Some(g.scale(prior, T::of(*prior_weight)));
                Reduction::Compact(pooled.compacted)
            }
            Baseline::Cp { stride } => {
                Reduction::Compact(baselines::conv_pool(g, x, p, &batch.enc_valid, *stride, *stride)?)
            }
            _ => {
                let (gv, out) = match gated_output(cfg, batch, opts)? {
                    Some(out) => {
                        let t = Tensor::from_f64(vec![bsz, n], &out.values)?;
                        (g.constant(t), out)
                    }
                    None => {
                        let noise = (cfg.use_gumbel_noise && opts.training).then(|| {
                            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6a09_e667_f3bc_c908);
                            sample_uniform_pairs(&mut rng, bsz * n)
                        });
                        delete_gate(g, x, p, cfg.gate_floor, cfg.norm_eps, noise.as_deref(), &batch.enc_valid)?
                    }
                };
                stats.bos_deleted = (0..bsz)
                    .filter(|&b| batch.enc_ids[b * n] == BOS_ID && batch.enc_valid[b * n] && !out.keep[b * n])
                    .count();
                stats.kept = out.kept_count.clone();
                let red = if opts.mode == DeletionMode::Soft {
                    Reduction::Soft(g.reshape(gv, &[bsz, 1, 1, n])?)
                } else {
                    Reduction::Compact(hard_delete(g, x, &out, &batch.enc_valid)?)
                };
                gate = Some(out);
                gate_var = Some(gv);
                red
            }
        }
    };
    let mut cross_gate = None;
    let mut kept_index = None;
    let (memory_len, memory_valid) = match reduction {
        Reduction::Plain => {
            x = post_gate_layers(g, p, cfg, x, &[bias, pad], opts, &mut score_vars)?;
            (n, batch.enc_valid.clone())
        }
        Reduction::Soft(gv) => {
            x = post_gate_layers(g, p, cfg, x, &[bias, pad, gv], opts, &mut score_vars)?;
            cross_gate = Some(gv);
            (n, batch.enc_valid.clone())
        }
        Reduction::Compact(c) => {
            let cbias = positional_bias(g, p, cfg, &c)?;
            let cpad = g.constant(additive_mask(&c.valid, bsz, c.len));
            x = post_gate_layers(g, p, cfg, c.hidden, &[cbias, cpad], opts, &mut score_vars)?;
            stats.kept = c.kept_counts();
            stats.rescued = c.rescued;
            kept_index = Some(c.kept_index);
            (c.len, c.valid)
        }
    };
    stats.post_gate_time = start.elapsed();
    let memory = g.rms_norm(x, p.try_var("encoder.final_norm")?, T::of(cfg.norm_eps))?;
    Ok(EncoderOutput {
        memory,
        memory_len,
        memory_valid,
        cross_gate,
        gate,
        gate_var,
        score_vars,
        aux_loss,
        kept_index,
        stats,
    })
}

fn post_gate_layers<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    mut x: Var,
    adds: &[Var],
    opts: &ForwardOptions,
    scores: &mut Vec<Var>,
) -> Result<Var> {
    for l in cfg.gate_layer..cfg.encoder_layers {
        let (y, s) = encoder_layer(g, p, cfg, l, x, adds)?;
        if opts.collect_scores {
            scores.push(s);
        }
        x = y;
    }
    Ok(x)
}

/// Decoder output: next-token logits `[batch × dec_len × vocab]` and, when
/// requested, the scaled cross-attention scores of every layer.
pub struct DecoderOutput {
    pub logits: Var,
    pub cross_scores: Vec<Var>,
}

/// Causal decoder over `dec_ids` cross-attending to the encoder memory.
pub fn decoder_forward<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    enc: &EncoderOutput,
    collect_scores: bool,
) -> Result<DecoderOutput> {
    let (bsz, m) = (batch.batch, batch.dec_len);
    let mut y = g.embedding(p.try_var("shared.embed")?, &batch.dec_ids, &[bsz, m])?;
    let pos: Vec<usize> = (0..m).collect();
    let buckets = bucket_matrix(&pos, &pos, false, cfg.n_buckets, cfg.max_distance);
    let self_bias = g.bias_gather(p.try_var("decoder.rel_bias")?, buckets, 1, m, m)?;
    let mut causal = vec![T::zero(); m * m];
    for i in 0..m {
        for j in i + 1..m {
            causal[i * m + j] = T::of(MASK_VALUE);
        }
    }
    let causal = g.constant(Tensor::new(vec![m, m], causal)?);
    let mem_pad = g.constant(additive_mask(&enc.memory_valid, bsz, enc.memory_len));
    let mut cross_adds = vec![mem_pad];
    cross_adds.extend(enc.cross_gate);
    let mut cross_scores = Vec::new();
    let eps = T::of(cfg.norm_eps);
    for l in 0..cfg.decoder_layers {
        let pre = format!("decoder.{l}");
        let h = g.rms_norm(y, p.try_var(&format!("{pre}.self_norm"))?, eps)?;
        let (a, _) = attention(g, p, cfg, &format!("{pre}.self"), h, h, &[self_bias, causal])?;
        y = g.add(y, a)?;
        let h = g.rms_norm(y, p.try_var(&format!("{pre}.cross_norm"))?, eps)?;
        let (a, s) = attention(g, p, cfg, &format!("{pre}.cross"), h, enc.memory, &cross_adds)?;
        if collect_scores {
            cross_scores.push(s);
        }
        y = g.add(y, a)?;
        y = feed_forward(g, p, cfg, &pre, y)?;
    }
    let h = g.rms_norm(y, p.try_var("decoder.final_norm")?, eps)?;
    let logits = g.matmul(h, p.try_var("lm_head")?, false)?;
    Ok(DecoderOutput { logits, cross_scores })
}
