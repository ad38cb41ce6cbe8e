//! Hard deletion: physically removing gated-out positions and repadding the batch.

use super::gate::GateOutput;
use crate::numerics::{Float, Graph, Var};
use crate::{Error, Result};

/// A batch shortened by hard deletion or pooling.
#[derive(Clone, Debug)]
pub struct Compacted {
    pub hidden: Var,
    pub batch: usize,
    pub len: usize,
    /// `[batch × len]`, true on real (non-pad) rows.
    pub valid: Vec<bool>,
    /// `[batch × len]` original position used for relative-bias bucketing; 0 on pads.
    pub positions: Vec<usize>,
    /// Original indices of the surviving rows, per sequence, strictly increasing.
    pub kept_index: Vec<Vec<usize>>,
    /// Sequences that would have lost every token and kept their highest-G one instead.
    pub rescued: usize,
}

impl Compacted {
    pub fn kept_counts(&self) -> Vec<usize> {
        self.kept_index.iter().map(Vec::len).collect()
    }
}

/// Per-sequence kept indices after the `G > k/2` threshold, with the
/// argmax-G rescue for sequences that would be emptied.
pub fn kept_indices(gate: &GateOutput, valid: &[bool]) -> Result<(Vec<Vec<usize>>, usize)> {
    let mut rescued = 0;
    let mut out = Vec::with_capacity(gate.batch);
    for b in 0..gate.batch {
        let base = b * gate.len;
        let mut kept: Vec<usize> = (0..gate.len).filter(|&i| gate.keep[base + i]).collect();
        if kept.is_empty() {
            let best = (0..gate.len)
                .filter(|&i| valid[base + i])
                .max_by(|&i, &j| gate.values[base + i].total_cmp(&gate.values[base + j]).then(j.cmp(&i)))
                .ok_or_else(|| Error::Empty(format!("sequence {b} has no valid tokens")))?;
            log::warn!("sequence {b}: every token deleted, keeping position {best}");
            kept.push(best);
            rescued += 1;
        }
        out.push(kept);
    }
    Ok((out, rescued))
}

/// Gathers surviving rows of `hidden` (`[batch × len × d]`) into a batch padded
/// to the longest survivor.
pub fn compact_rows<T: Float>(g: &mut Graph<T>, hidden: Var, kept_index: Vec<Vec<usize>>, rescued: usize) -> Result<Compacted> {
    let shape = g.shape(hidden).to_vec();
    if shape.len() != 3 || shape[0] != kept_index.len() {
        return Err(Error::Shape(format!("compaction of {shape:?} with {} index lists", kept_index.len())));
    }
    let (batch, len, d) = (shape[0], shape[1], shape[2]);
    let new_len = kept_index.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut rows = Vec::with_capacity(batch * new_len);
    let mut valid = Vec::with_capacity(batch * new_len);
    let mut positions = Vec::with_capacity(batch * new_len);
    for (b, kept) in kept_index.iter().enumerate() {
        if kept.windows(2).any(|w| w[0] >= w[1]) || kept.iter().any(|&i| i >= len) {
            return Err(Error::Invalid(format!("kept indices for sequence {b} must be increasing and < {len}")));
        }
        for j in 0..new_len {
            match kept.get(j) {
                Some(&i) => {
                    rows.push(Some(b * len + i));
                    valid.push(true);
                    positions.push(i);
                }
                None => {
                    rows.push(None);
                    valid.push(false);
                    positions.push(0);
                }
            }
        }
    }
    let hidden = g.gather_rows(hidden, rows, &[batch, new_len, d])?;
    Ok(Compacted { hidden, batch, len: new_len, valid, positions, kept_index, rescued })
}

/// Drops every position with `G <= k/2` and repads to the longest survivor.
pub fn hard_delete<T: Float>(g: &mut Graph<T>, hidden: Var, gate: &GateOutput, valid: &[bool]) -> Result<Compacted> {
    let (kept, rescued) = kept_indices(gate, valid)?;
    compact_rows(g, hidden, kept, rescued)
}
