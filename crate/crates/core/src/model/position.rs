//! T5-style log-bucketed relative position biases.

use crate::numerics::{Float, Tensor};
use crate::{Error, Result};

/// Bucket of `relative = key_pos - query_pos`.
///
/// Bidirectional buckets split the range in two halves by sign; within a half,
/// the first `n/2` distances get exact buckets and the rest are log-spaced up to
/// `max_distance`.
pub fn relative_position_bucket(relative: i64, bidirectional: bool, n_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = n_buckets;
    let mut ret = 0usize;
    let dist = if bidirectional {
        buckets /= 2;
        if relative > 0 {
            ret += buckets;
        }
        relative.unsigned_abs() as usize
    } else {
        (-relative.min(0)) as usize
    };
    let max_exact = buckets / 2;
    if dist < max_exact {
        return ret + dist;
    }
    let scaled = (dist as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
        * (buckets - max_exact) as f64;
    ret + (max_exact + scaled as usize).min(buckets - 1)
}

/// Bucket matrix `[q.len() × k.len()]` for arbitrary absolute positions.
pub fn bucket_matrix(
    query_pos: &[usize],
    key_pos: &[usize],
    bidirectional: bool,
    n_buckets: usize,
    max_distance: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(query_pos.len() * key_pos.len());
    for &qp in query_pos {
        for &kp in key_pos {
            out.push(relative_position_bucket(kp as i64 - qp as i64, bidirectional, n_buckets, max_distance));
        }
    }
    out
}

/// Dense bias `[heads × q_len × k_len]` from a learned `[n_buckets × heads]` table.
pub fn relative_position_bias<T: Float>(
    table: &Tensor<T>,
    q_len: usize,
    k_len: usize,
    n_buckets: usize,
    max_distance: usize,
) -> Result<Tensor<T>> {
    if q_len == 0 || k_len == 0 {
        return Err(Error::Invalid("relative_position_bias needs positive lengths".into()));
    }
    let s = table.shape();
    if s.len() != 2 || s[0] != n_buckets {
        return Err(Error::Shape(format!("bias table {s:?} does not match {n_buckets} buckets")));
    }
    let heads = s[1];
    let qp: Vec<usize> = (0..q_len).collect();
    let kp: Vec<usize> = (0..k_len).collect();
    let b = bucket_matrix(&qp, &kp, true, n_buckets, max_distance);
    let mut out = vec![T::zero(); heads * q_len * k_len];
    for h in 0..heads {
        for (i, &bk) in b.iter().enumerate() {
            out[h * q_len * k_len + i] = table.data()[bk * heads + h];
        }
    }
    Tensor::new(vec![heads, q_len, k_len], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distance_is_bucket_zero() {
        assert_eq!(relative_position_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_position_bucket(0, false, 32, 128), 0);
    }

    #[test]
    fn sign_selects_half() {
        assert_eq!(relative_position_bucket(-3, true, 32, 128), 3);
        assert_eq!(relative_position_bucket(3, true, 32, 128), 19);
        // causal buckets ignore keys to the right
        assert_eq!(relative_position_bucket(5, false, 32, 128), 0);
        assert_eq!(relative_position_bucket(-5, false, 32, 128), 5);
    }

    #[test]
    fn far_distances_saturate() {
        assert_eq!(relative_position_bucket(-10_000, true, 32, 128), 15);
        assert_eq!(relative_position_bucket(10_000, true, 32, 128), 31);
    }

    #[test]
    fn single_position_bias_shape() {
        let table = Tensor::<f64>::from_f64(vec![8, 2], &(0..16).map(|x| x as f64).collect::<Vec<_>>()).unwrap();
        let b = relative_position_bias(&table, 1, 1, 8, 16).unwrap();
        assert_eq!(b.shape(), &[2, 1, 1]);
        assert_eq!(b.data(), &[0.0, 1.0]);
    }
}
