use crate::numerics::{Float, Graph, Tensor, Var};
use crate::{Error, Result};

/// Per-position weights averaging `G` over each sequence's valid positions, then over sequences.
pub fn gate_weights(valid: &[bool], len: usize) -> Result<Vec<f64>> {
    if len == 0 || valid.len() % len != 0 {
        return Err(Error::Shape(format!("{} mask entries do not split into rows of {len}", valid.len())));
    }
    let rows: Vec<usize> = valid.chunks(len).map(|r| r.iter().filter(|&&v| v).count()).collect();
    let live = rows.iter().filter(|&&n| n > 0).count();
    if live == 0 {
        return Err(Error::Empty("gate regularizer needs at least one valid position".into()));
    }
    Ok(valid
        .iter()
        .enumerate()
        .map(|(i, &v)| if v { 1.0 / (rows[i / len] * live) as f64 } else { 0.0 })
        .collect())
}

/// Mean gate value over valid positions.
pub fn gate_regularizer<T: Float>(g: &mut Graph<T>, gate: Var, valid: &[bool]) -> Result<Var> {
    let len = *g.shape(gate).last().ok_or_else(|| Error::Shape("scalar gate".into()))?;
    if g.value(gate).numel() != valid.len() {
        return Err(Error::Shape(format!("{} gate values for {} mask entries", g.value(gate).numel(), valid.len())));
    }
    let w = gate_weights(valid, len)?.into_iter().map(T::of).collect();
    g.weighted_sum(gate, w)
}

/// `μ(S) = mean(max(s, m)) - m` for one score matrix.
pub fn clamped_score_mean(scores: &[f64], m: f64) -> f64 {
    scores.iter().map(|&s| s.max(m)).sum::<f64>() / scores.len() as f64 - m
}

/// Average of `μ(S)` over the given score matrices.
pub fn attention_score_regularizer<T: Float>(g: &mut Graph<T>, scores: &[Var], m: f64) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::Empty("attention score regularizer needs at least one score matrix".into()));
    }
    let mut acc: Option<Var> = None;
    for &s in scores {
        let c = g.clamp_min(s, T::of(m));
        let mu = g.mean(c);
        acc = Some(match acc {
            Some(a) => g.add(a, mu)?,
            None => mu,
        });
    }
    let avg = g.scale(acc.expect("non-empty"), T::of(1.0 / scores.len() as f64));
    let shift = g.constant(Tensor::scalar(T::of(-m)));
    g.add(avg, shift)
}

/// `ce + α·L_G + β·L_S`; absent terms count as zero.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    ce: Var,
    lg: Option<Var>,
    ls: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut loss = ce;
    for (term, w) in [(lg, alpha), (ls, beta)] {
        if let Some(t) = term {
            if w != 0.0 {
                let s = g.scale(t, T::of(w));
                loss = g.add(loss, s)?;
            }
        }
    }
    Ok(loss)
}
