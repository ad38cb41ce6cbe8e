//! Span corruption: byte spans replaced by one sentinel each, reconstructed by the decoder.

use rand::seq::index::sample;
use rand::Rng;

use super::tasks::{example_rng, TaskExample};
use super::vocab::{ByteVocab, BOS_ID, EOS_ID};
use crate::{Error, Result};

/// Splits `n` items into `parts` positive lengths, uniformly over compositions.
fn random_segmentation<R: Rng + ?Sized>(rng: &mut R, n: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, n - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(n)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Noise mask over `len` positions: alternating kept/noise runs, kept first.
///
/// `round(len · density)` positions (at least one) are noise, split into
/// `round(noise / mean_span)` spans (at least one, at most `max_spans`).
pub fn noise_mask<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    density: f64,
    mean_span: f64,
    max_spans: usize,
) -> Result<Vec<bool>> {
    if len < 2 {
        return Err(Error::Invalid(format!("span corruption needs at least 2 tokens, got {len}")));
    }
    if !(density > 0.0 && density < 1.0) || mean_span <= 0.0 || max_spans == 0 {
        return Err(Error::Invalid(format!("bad span corruption parameters density={density} mean_span={mean_span}")));
    }
    let noise = ((len as f64 * density).round() as usize).clamp(1, len - 1);
    let kept = len - noise;
    let spans = ((noise as f64 / mean_span).round() as usize).max(1).min(noise).min(kept).min(max_spans);
    let noise_lens = random_segmentation(rng, noise, spans);
    let kept_lens = random_segmentation(rng, kept, spans);
    let mut mask = Vec::with_capacity(len);
    for (k, n) in kept_lens.into_iter().zip(noise_lens) {
        mask.extend(std::iter::repeat_n(false, k));
        mask.extend(std::iter::repeat_n(true, n));
    }
    Ok(mask)
}

/// Input keeps unmasked bytes with one sentinel per span; target is
/// `bos, s₀, span₀, s₁, span₁, …, s_last, eos`. Sentinel ids increase.
pub fn span_corrupt_ids(ids: &[usize], mask: &[bool], vocab: &ByteVocab) -> Result<TaskExample> {
    if ids.len() != mask.len() {
        return Err(Error::Shape(format!("{} ids with {} mask entries", ids.len(), mask.len())));
    }
    let mut input = Vec::with_capacity(ids.len() + 1);
    let mut target = vec![BOS_ID];
    let mut next = 0;
    let sentinel = |next: &mut usize| -> Result<usize> {
        let s = vocab.sentinel(*next).ok_or_else(|| Error::Invalid(format!("sentinel budget {} exhausted", vocab.sentinels)))?;
        *next += 1;
        Ok(s)
    };
    for (i, (&id, &m)) in ids.iter().zip(mask).enumerate() {
        if m {
            if i == 0 || !mask[i - 1] {
                let s = sentinel(&mut next)?;
                input.push(s);
                target.push(s);
            }
            target.push(id);
        } else {
            input.push(id);
        }
    }
    target.push(sentinel(&mut next)?);
    input.push(EOS_ID);
    target.push(EOS_ID);
    Ok(TaskExample { input, target })
}

/// Corrupts raw bytes with a seeded mask.
pub fn span_corrupt(
    bytes: &[u8],
    density: f64,
    mean_span: f64,
    vocab: &ByteVocab,
    seed: u64,
) -> Result<TaskExample> {
    let mut rng = example_rng(seed, 0);
    let mask = noise_mask(&mut rng, bytes.len(), density, mean_span, vocab.sentinels.saturating_sub(1))?;
    span_corrupt_ids(&vocab.encode(bytes), &mask, vocab)
}

/// Splices target spans back in place of input sentinels.
pub fn reconstruct(ex: &TaskExample, vocab: &ByteVocab) -> Vec<usize> {
    let mut spans: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    let mut current = None;
    for &t in &ex.target {
        if vocab.is_sentinel(t) {
            current = Some(t);
            spans.entry(t).or_default();
        } else if t != BOS_ID && t != EOS_ID {
            if let Some(s) = current {
                spans.get_mut(&s).expect("entry created").push(t);
            }
        }
    }
    let mut out = Vec::new();
    for &t in &ex.input {
        if vocab.is_sentinel(t) {
            out.extend(spans.get(&t).into_iter().flatten());
        } else if t != EOS_ID {
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_sums_and_is_positive() {
        let mut rng = example_rng(1, 1);
        for parts in 1..10 {
            let s = random_segmentation(&mut rng, 20, parts);
            assert_eq!(s.len(), parts);
            assert_eq!(s.iter().sum::<usize>(), 20);
            assert!(s.iter().all(|&x| x > 0));
        }
    }

    #[test]
    fn tiny_density_gives_one_span() {
        let v = ByteVocab::new(10);
        let ex = span_corrupt(b"abcdefghij", 0.01, 3.0, &v, 0).unwrap();
        assert_eq!(ex.input.iter().filter(|&&t| v.is_sentinel(t)).count(), 1);
        assert_eq!(reconstruct(&ex, &v), v.encode(b"abcdefghij"));
    }
}
