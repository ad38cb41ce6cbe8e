//! Slice-level kernels shared by the graph ops and the standalone tensor functions.

use super::Float;

/// `softmax₁` over one row: `exp(x_i) / (1 + Σ_j exp(x_j))`.
///
/// With `m = max(0, max_j x_j)` every exponent is `≤ 0` and the implicit
/// constant term becomes `exp(-m)`, so the result is exact and cannot overflow.
pub fn softmax_one_row<T: Float>(x: &[T], out: &mut [T]) {
    let mut m = T::zero();
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut denom = (-m).exp();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        denom += e;
    }
    let inv = T::one() / denom;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Backward of any softmax-style row map: `dx_i = y_i (g_i - Σ_j g_j y_j)`.
pub fn softmax_row_backward<T: Float>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d += yi * (gi - dot);
    }
}

/// Returns `1 / sqrt(mean(x²) + eps)` and writes `x * r * gain`.
pub fn rms_norm_row<T: Float>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let r = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * r * g;
    }
    r
}

/// Standard log-sum-exp of a row.
pub fn log_sum_exp<T: Float>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Strides of `b` aligned to `out`, with zero stride on broadcast axes.
pub fn broadcast_strides(out: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > out.len() {
        return None;
    }
    let offset = out.len() - b.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..b.len()).rev() {
        let (bd, od) = (b[i], out[i + offset]);
        if bd == od {
            strides[i + offset] = if bd == 1 { 0 } else { acc };
        } else if bd != 1 {
            return None;
        }
        acc *= bd;
    }
    Some(strides)
}

/// Walks `out` row by row (last axis), yielding `(out_start, b_start, len, b_inner_stride)`.
pub fn for_each_broadcast_row(
    out: &[usize],
    strides: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let nd = out.len();
    let inner = out[nd - 1];
    let inner_stride = strides[nd - 1];
    let rows: usize = out[..nd - 1].iter().product();
    let mut counter = vec![0usize; nd.saturating_sub(1)];
    let mut b_off = 0usize;
    for row in 0..rows {
        f(row * inner, b_off, inner, inner_stride);
        // increment the multi-index over the outer axes
        let mut ax = nd - 1;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            b_off += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            b_off -= strides[ax] * out[ax];
            counter[ax] = 0;
        }
    }
}

/// Copies `src` (shape `shape`) into `dst` permuted so that `dst` axis `i` is `src` axis `perm[i]`.
/// When `accumulate` is set the values are added instead.
pub fn permute_into<T: Float>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T], accumulate: bool) {
    let nd = shape.len();
    let mut src_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    for_each_broadcast_row(&out_shape, &strides, |o, s, len, st| {
        let d = &mut dst[o..o + len];
        if accumulate {
            for (i, v) in d.iter_mut().enumerate() {
                *v += src[s + i * st];
            }
        } else {
            for (i, v) in d.iter_mut().enumerate() {
                *v = src[s + i * st];
            }
        }
    });
}

/// Accumulating GEMM on contiguous row-major operands with optional transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are bounds-checked above and `c` is exclusively borrowed.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_strides_basic() {
        assert_eq!(broadcast_strides(&[2, 3, 4], &[4]), Some(vec![0, 0, 1]));
        assert_eq!(broadcast_strides(&[2, 3, 4], &[2, 1, 4]), Some(vec![4, 0, 1]));
        assert_eq!(broadcast_strides(&[2, 3, 4], &[3, 1]), Some(vec![0, 1, 0]));
        assert_eq!(broadcast_strides(&[2, 3], &[3, 3]), None);
    }

    #[test]
    fn permute_swaps_middle_axes() {
        // shape [1, 2, 3, 1] -> perm [0, 2, 1, 3]
        let src: Vec<f64> = (0..6).map(|x| x as f64).collect();
        let mut dst = vec![0.0; 6];
        permute_into(&src, &[1, 2, 3, 1], &[0, 2, 1, 3], &mut dst, false);
        assert_eq!(dst, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm_acc(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm_acc(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm_acc(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
