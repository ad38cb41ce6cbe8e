//! Dense tensors, kernels and the reverse-mode tape used by every model in the crate.

mod float;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use float::Float;
pub use gradcheck::finite_difference_check;
pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::{Error, Result};

fn ensure_finite<T: Float>(t: &Tensor<T>, what: &str) -> Result<()> {
    match t.data().iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}: value {} at flat index {i}", t.data()[i]))),
        None => Ok(()),
    }
}

/// `softmax₁` along `axis`: `exp(x_i) / (1 + Σ_j exp(x_j))`.
pub fn softmax_one<T: Float>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= logits.ndim() {
        return Err(Error::Shape(format!("axis {axis} out of range for {:?}", logits.shape())));
    }
    ensure_finite(logits, "softmax_one input")?;
    let shape = logits.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); logits.numel()];
    let mut row = vec![T::zero(); len];
    let mut res = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, r) in row.iter_mut().enumerate() {
                *r = logits.data()[base + j * inner];
            }
            kernels::softmax_one_row(&row, &mut res);
            for (j, &v) in res.iter().enumerate() {
                out[base + j * inner] = v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Root-mean-square normalisation over the last axis, scaled by `gain`.
pub fn rms_norm<T: Float>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let w = x.last_dim();
    if gain.numel() != w {
        return Err(Error::Shape(format!("gain has {} values, last axis is {w}", gain.numel())));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (row, o) in x.data().chunks(w).zip(out.chunks_mut(w)) {
        kernels::rms_norm_row(row, gain.data(), eps, o);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean negative log-likelihood over positions whose target is not `ignore_id`.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, targets: &[usize], ignore_id: usize) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != ignore_id).then_some(t)).collect();
    let loss = g.cross_entropy(l, &t)?;
    Ok(g.value(loss).item())
}
