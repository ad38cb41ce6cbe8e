use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stats::{bits_per_byte, median};
use crate::data::{byte_of, collate, is_vowel, TaskExample, BOS_ID, EOS_ID, PAD_ID};
use crate::model::{Batch, DeletionMode, ForwardOptions, Model};
use crate::numerics::{Float, Graph, Var};
use crate::{Error, Result};

/// Deletion frequency per token class: deleted / seen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeletionProfile {
    pub vowels: f64,
    pub consonants: f64,
    pub bos: f64,
    pub eos: f64,
    pub other_bytes: f64,
    pub specials: f64,
    /// Deletion frequency of each printable byte, keyed by the character.
    pub by_byte: BTreeMap<String, f64>,
    /// Share of all deletions that fall on each printable byte.
    pub share_by_byte: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default)]
struct Counter {
    seen: BTreeMap<String, (usize, usize)>,
    classes: [(usize, usize); 6],
}

impl Counter {
    fn add(&mut self, id: usize, deleted: bool) {
        let class = match (id, byte_of(id)) {
            (BOS_ID, _) => 2,
            (EOS_ID, _) => 3,
            (_, Some(b)) if b.is_ascii_alphabetic() && is_vowel(b) => 0,
            (_, Some(b)) if b.is_ascii_alphabetic() => 1,
            (_, Some(_)) => 4,
            _ => 5,
        };
        let c = &mut self.classes[class];
        c.0 += usize::from(deleted);
        c.1 += 1;
        if let Some(b) = byte_of(id).filter(|b| b.is_ascii_graphic() || *b == b' ') {
            let e = self.seen.entry((b as char).to_string()).or_default();
            e.0 += usize::from(deleted);
            e.1 += 1;
        }
    }

    fn profile(&self) -> DeletionProfile {
        let f = |(d, n): (usize, usize)| if n == 0 { 0.0 } else { d as f64 / n as f64 };
        let total_deleted: usize = self.seen.values().map(|e| e.0).sum();
        DeletionProfile {
            vowels: f(self.classes[0]),
            consonants: f(self.classes[1]),
            bos: f(self.classes[2]),
            eos: f(self.classes[3]),
            other_bytes: f(self.classes[4]),
            specials: f(self.classes[5]),
            by_byte: self.seen.iter().map(|(k, &v)| (k.clone(), f(v))).collect(),
            share_by_byte: self
                .seen
                .iter()
                .map(|(k, &(d, _))| (k.clone(), if total_deleted == 0 { 0.0 } else { d as f64 / total_deleted as f64 }))
                .collect(),
        }
    }
}

/// Evaluation summary; percentages are in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: DeletionMode,
    pub sequences: usize,
    /// Teacher-forced per-sequence token accuracy, averaged over sequences.
    pub token_acc: f64,
    /// Share of sequences with every target token correct.
    pub seq_acc: f64,
    pub ce: f64,
    pub bpb: f64,
    pub seq_len_reduction: f64,
    /// Median wall-clock per sequence of a full forward pass in `mode`.
    pub runtime_ms: f64,
    pub runtime_ms_mean: f64,
    /// Same measurement with deletion disabled.
    pub baseline_runtime_ms: f64,
    /// Median wall-clock per sequence of the post-gate encoder layers.
    pub post_gate_ms: f64,
    pub baseline_post_gate_ms: f64,
    pub rescued_sequences: usize,
    pub bos_deleted: usize,
    pub deletion_profile: DeletionProfile,
    /// Largest relative soft/hard disagreement on kept positions, for gated models.
    pub soft_hard_divergence: Option<f64>,
}

/// Per-sequence results of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScores {
    pub correct: Vec<usize>,
    pub counted: Vec<usize>,
    /// Summed target negative log-likelihood per sequence (nats).
    pub nll: Vec<f64>,
    pub kept: Vec<usize>,
    pub valid: Vec<usize>,
}

fn row_nll_and_argmax<T: Float>(row: &[T], target: usize) -> (f64, usize) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.f64()));
    let lse = m + row.iter().map(|&x| (x.f64() - m).exp()).sum::<f64>().ln();
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    (lse - row[target].f64(), best)
}

/// Teacher-forced scores for one batch.
pub fn score_batch<T: Float>(g: &Graph<T>, logits: Var, batch: &Batch) -> SequenceScores {
    let lv = g.value(logits);
    let v = lv.last_dim();
    let mut s = SequenceScores {
        correct: vec![0; batch.batch],
        counted: vec![0; batch.batch],
        nll: vec![0.0; batch.batch],
        kept: vec![],
        valid: vec![],
    };
    for (pos, t) in batch.dec_targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let b = pos / batch.dec_len;
        let (nll, arg) = row_nll_and_argmax(&lv.data()[pos * v..(pos + 1) * v], t);
        s.nll[b] += nll;
        s.counted[b] += 1;
        s.correct[b] += usize::from(arg == t);
    }
    s
}

fn timed_forward<T: Float>(model: &Model<T>, batch: &Batch, mode: DeletionMode, runs: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let opts = ForwardOptions::new(mode);
    model.run(batch, &opts)?;
    let mut total = Vec::with_capacity(runs);
    let mut post = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let (_, f) = model.run(batch, &opts)?;
        total.push(t.elapsed().as_secs_f64() * 1e3 / batch.batch as f64);
        post.push(f.enc.stats.post_gate_time.as_secs_f64() * 1e3 / batch.batch as f64);
    }
    Ok((total, post))
}

/// Largest relative difference between soft and hard passes on kept encoder
/// rows and on the decoder logits: `max|a-b| / max|b|`.
pub fn soft_hard_divergence<T: Float>(model: &Model<T>, batch: &Batch, gate_override: Option<Vec<f64>>) -> Result<f64> {
    let mut soft_opts = ForwardOptions::new(DeletionMode::Soft);
    soft_opts.gate_override = gate_override.clone();
    let mut hard_opts = ForwardOptions::new(DeletionMode::Hard);
    hard_opts.gate_override = gate_override;
    let (gs, fs) = model.run(batch, &soft_opts)?;
    let (gh, fh) = model.run(batch, &hard_opts)?;
    let kept = fh.enc.kept_index.as_ref().ok_or_else(|| Error::Invalid("hard pass did not shorten the batch".into()))?;
    let d = model.cfg.d_model;
    let (ms, mh) = (gs.value(fs.enc.memory).data(), gh.value(fh.enc.memory).data());
    let (n, nh) = (batch.enc_len, fh.enc.memory_len);
    let (mut diff, mut scale) = (0f64, 0f64);
    for (b, idx) in kept.iter().enumerate() {
        for (j, &i) in idx.iter().enumerate() {
            let a = &ms[(b * n + i) * d..(b * n + i + 1) * d];
            let h = &mh[(b * nh + j) * d..(b * nh + j + 1) * d];
            for (&x, &y) in a.iter().zip(h) {
                diff = diff.max((x.f64() - y.f64()).abs());
                scale = scale.max(y.f64().abs());
            }
        }
    }
    let enc_rel = diff / scale.max(1e-30);
    let (ls, lh) = (gs.value(fs.dec.logits).data(), gh.value(fh.dec.logits).data());
    let ldiff = ls.iter().zip(lh).map(|(&x, &y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max);
    let lscale = lh.iter().map(|&y| y.f64().abs()).fold(0.0, f64::max);
    Ok(enc_rel.max(ldiff / lscale.max(1e-30)))
}

/// Evaluates `examples` in `mode` with batches of `batch_size`; timings use
/// the median of `timing_runs` warm passes over the first batch.
pub fn eval_model<T: Float>(
    model: &Model<T>,
    examples: &[TaskExample],
    mode: DeletionMode,
    batch_size: usize,
    timing_runs: usize,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation dataset is empty".into()));
    }
    let batch_size = batch_size.max(1);
    let opts = ForwardOptions::new(mode);
    let mut tok_acc_sum = 0.0;
    let mut seq_ok = 0;
    let (mut nll, mut tokens) = (0.0, 0usize);
    let (mut kept, mut valid) = (0usize, 0usize);
    let (mut rescued, mut bos_deleted) = (0, 0);
    let mut counter = Counter::default();
    for chunk in examples.chunks(batch_size) {
        let batch = collate(chunk)?;
        let (g, f) = model.run(&batch, &opts)?;
        let s = score_batch(&g, f.dec.logits, &batch);
        for b in 0..batch.batch {
            if s.counted[b] > 0 {
                tok_acc_sum += s.correct[b] as f64 / s.counted[b] as f64;
                seq_ok += usize::from(s.correct[b] == s.counted[b]);
            }
        }
        nll += s.nll.iter().sum::<f64>();
        tokens += s.counted.iter().sum::<usize>();
        kept += f.enc.stats.kept.iter().sum::<usize>();
        valid += f.enc.stats.valid.iter().sum::<usize>();
        rescued += f.enc.stats.rescued;
        bos_deleted += f.enc.stats.bos_deleted;
        if let Some(gate) = &f.enc.gate {
            for (i, (&id, &ok)) in batch.enc_ids.iter().zip(&batch.enc_valid).enumerate() {
                if ok && id != PAD_ID {
                    counter.add(id, !gate.keep[i]);
                }
            }
        }
    }
    let n = examples.len() as f64;
    let first = collate(&examples[..batch_size.min(examples.len())])?;
    let runs = timing_runs.max(1);
    let (t_mode, p_mode) = timed_forward(model, &first, mode, runs)?;
    let (t_base, p_base) = timed_forward(model, &first, DeletionMode::None, runs)?;
    let gated = model.cfg.baseline.is_gated();
    let divergence = if gated && mode != DeletionMode::None { Some(soft_hard_divergence(model, &first, None)?) } else { None };
    let ce = if tokens == 0 { 0.0 } else { nll / tokens as f64 };
    Ok(EvalReport {
        mode,
        sequences: examples.len(),
        token_acc: 100.0 * tok_acc_sum / n,
        seq_acc: 100.0 * seq_ok as f64 / n,
        ce,
        bpb: bits_per_byte(ce),
        seq_len_reduction: if valid == 0 { 0.0 } else { 100.0 * (1.0 - kept as f64 / valid as f64) },
        runtime_ms: median(&t_mode),
        runtime_ms_mean: t_mode.iter().sum::<f64>() / t_mode.len() as f64,
        baseline_runtime_ms: median(&t_base),
        post_gate_ms: median(&p_mode),
        baseline_post_gate_ms: median(&p_base),
        rescued_sequences: rescued,
        bos_deleted,
        deletion_profile: counter.profile(),
        soft_hard_divergence: divergence,
    })
}

/// Per-sample `(percent BPB increase over the none-mode pass, percent reduction)`.
pub fn per_sample_bpb_increase<T: Float>(
    model: &Model<T>,
    examples: &[TaskExample],
    mode: DeletionMode,
    batch_size: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = collate(chunk)?;
        let (g0, f0) = model.run(&batch, &ForwardOptions::new(DeletionMode::None))?;
        let (g1, f1) = model.run(&batch, &ForwardOptions::new(mode))?;
        let base = score_batch(&g0, f0.dec.logits, &batch);
        let red = score_batch(&g1, f1.dec.logits, &batch);
        for b in 0..batch.batch {
            let c = base.counted[b].max(1) as f64;
            let (b0, b1) = (bits_per_byte(base.nll[b] / c), bits_per_byte(red.nll[b] / c));
            let pct = if b0 > 0.0 { 100.0 * (b1 - b0) / b0 } else { 0.0 };
            let s = &f1.enc.stats;
            out.push((pct, 100.0 * (1.0 - s.kept[b] as f64 / s.valid[b] as f64)));
        }
    }
    Ok(out)
}
