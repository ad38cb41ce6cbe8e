//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends a node to the [`Graph`]; nodes only reference earlier
//! nodes, so the node list is already a topological order and the backward
//! pass is a single reverse sweep.

use statrs::function::gamma::{digamma, ln_gamma};

use super::kernels::{
    broadcast_strides, for_each_broadcast_row, gemm_acc, log_sum_exp, permute_into, rms_norm_row,
    softmax_one_row, softmax_row_backward,
};
use super::{Float, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, shared_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu(Var),
    Sigmoid(Var),
    Softmax1(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Sum(Var),
    WeightedSum { a: Var, weights: Vec<T> },
    ClampMin { a: Var, min: T },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<Option<usize>> },
    SegmentMean { a: Var, segment: Vec<Option<usize>>, counts: Vec<usize> },
    BiasGather { table: Var, buckets: Vec<usize>, q: usize, k: usize },
    StraightThrough { soft: Var },
    BinomialNll { count: Var, n: usize, p: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// The recording tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives gradients on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `a @ b` (or `a @ bᵀ`). `a` is `[.., m, k]`; `b` is either a shared 2-D
    /// matrix or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(format!("matmul needs >=2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(shape_err(format!("matmul inner mismatch {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(shape_err(format!("matmul batch mismatch {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                gemm_acc(batch * m, k, n, av, false, bv, trans_b, &mut out, T::zero());
            } else {
                for i in 0..batch {
                    gemm_acc(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        false,
                        &bv[i * k * n..],
                        trans_b,
                        &mut out[i * m * n..(i + 1) * m * n],
                        T::zero(),
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, trans_b, shared_b, batch, m, k, n },
            &[a, b],
        ))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let strides = broadcast_strides(&sa, &sb)
            .ok_or_else(|| shape_err(format!("cannot broadcast {sb:?} onto {sa:?}")))?;
        let mut out = self.value(a).data().to_vec();
        let bv = self.value(b).data();
        if sa == sb {
            for (o, &y) in out.iter_mut().zip(bv) {
                if mul {
                    *o *= y
                } else {
                    *o += y
                }
            }
        } else {
            for_each_broadcast_row(&sa, &strides, |o, s, len, st| {
                let row = &mut out[o..o + len];
                if st == 0 {
                    let y = bv[s];
                    for v in row {
                        if mul {
                            *v *= y
                        } else {
                            *v += y
                        }
                    }
                } else {
                    for (v, &y) in row.iter_mut().zip(&bv[s..s + len]) {
                        if mul {
                            *v *= y
                        } else {
                            *v += y
                        }
                    }
                }
            });
        }
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(Tensor::from_parts(sa, out), op, &[a, b]))
    }

    /// `a + b` with `b` broadcast (numpy rules) onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, false)
    }

    /// `a ⊙ b` with `b` broadcast onto the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| x * c).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::Scale { a, c }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn clamp_min(&mut self, a: Var, min: T) -> Var {
        self.unary(a, |x| if x > min { x } else { min }, Op::ClampMin { a, min })
    }

    /// `softmax₁` over the last axis.
    pub fn softmax_one(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let w = v.last_dim();
        let mut out = vec![T::zero(); v.numel()];
        for (x, o) in v.data().chunks(w).zip(out.chunks_mut(w)) {
            softmax_one_row(x, o);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::Softmax1(a), &[a])
    }

    /// RMS normalisation over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.value(gain).numel() != w {
            return Err(shape_err(format!(
                "rms_norm gain has {} values, last axis is {w}",
                self.value(gain).numel()
            )));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(xv.numel() / w);
        for (row, o) in xv.data().chunks(w).zip(out.chunks_mut(w)) {
            inv_rms.push(rms_norm_row(row, g, eps, o));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let mut out = vec![T::zero(); self.value(a).numel()];
        permute_into(self.value(a).data(), &shape, perm, &mut out, false);
        let new_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let w = vec![T::one() / T::of(n as f64); n];
        self.weighted_sum(a, w).expect("weights match by construction")
    }

    /// `Σ_i w_i a_i` as a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(a).numel() {
            return Err(shape_err(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(a).numel()
            )));
        }
        let s: f64 = self.value(a).data().iter().zip(&weights).map(|(&x, &w)| x.f64() * w.f64()).sum();
        Ok(self.push(Tensor::scalar(T::of(s)), Op::WeightedSum { a, weights }, &[a]))
    }

    /// Mean token-level cross-entropy (standard softmax over the last axis).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if targets.len() != rows {
            return Err(shape_err(format!("cross_entropy: {} targets for {rows} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every position is ignored".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Invalid(format!("target id {bad} outside vocabulary of {v}")));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        for (r, (row, p)) in lv.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let Some(t) = targets[r] else { continue };
            let lse = log_sum_exp(row);
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - lse).exp();
            }
            total += lse - row[t];
        }
        let loss = total / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        ))
    }

    /// Row lookup into a `[vocab, d]` table; output `[.., d]` with leading `shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err(format!("embedding table must be 2-D, got {ts:?}")));
        }
        if shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err(format!("{} ids for leading shape {shape:?}", ids.len())));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Gathers rows (last axis) of `a`; `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let n_rows = av.numel() / w;
        if shape.iter().product::<usize>() != rows.len() * w || shape.last() != Some(&w) {
            return Err(shape_err(format!("gather_rows: shape {shape:?} does not hold {} rows of {w}", rows.len())));
        }
        if let Some(bad) = rows.iter().flatten().find(|&&r| r >= n_rows) {
            return Err(shape_err(format!("gather_rows: row {bad} out of {n_rows}")));
        }
        let mut out = vec![T::zero(); rows.len() * w];
        for (o, r) in out.chunks_mut(w).zip(&rows) {
            if let Some(r) = r {
                o.copy_from_slice(&av.data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::GatherRows { a, rows }, &[a]))
    }

    /// Mean of input rows grouped by `segment[row]` into `n_out` output rows.
    pub fn segment_mean(&mut self, a: Var, segment: Vec<Option<usize>>, n_out: usize, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        if segment.len() != av.numel() / w {
            return Err(shape_err(format!("segment_mean: {} ids for {} rows", segment.len(), av.numel() / w)));
        }
        if shape.iter().product::<usize>() != n_out * w {
            return Err(shape_err(format!("segment_mean: shape {shape:?} does not hold {n_out} rows of {w}")));
        }
        let mut counts = vec![0usize; n_out];
        let mut out = vec![T::zero(); n_out * w];
        for (r, s) in segment.iter().enumerate() {
            let Some(s) = *s else { continue };
            if s >= n_out {
                return Err(shape_err(format!("segment id {s} out of {n_out}")));
            }
            counts[s] += 1;
            for (o, &x) in out[s * w..(s + 1) * w].iter_mut().zip(&av.data()[r * w..(r + 1) * w]) {
                *o += x;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = T::one() / T::of(c as f64);
                for o in &mut out[s * w..(s + 1) * w] {
                    *o *= inv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::SegmentMean { a, segment, counts }, &[a]))
    }

    /// Per-head bias lookup: `table` is `[n_buckets, heads]`, `buckets` is
    /// `[groups, q, k]`; the output is `[groups, heads, q, k]`.
    pub fn bias_gather(&mut self, table: Var, buckets: Vec<usize>, groups: usize, q: usize, k: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || buckets.len() != groups * q * k {
            return Err(shape_err(format!("bias_gather: table {ts:?}, {} buckets for {groups}x{q}x{k}", buckets.len())));
        }
        let (nb, heads) = (ts[0], ts[1]);
        if let Some(bad) = buckets.iter().find(|&&b| b >= nb) {
            return Err(shape_err(format!("bucket {bad} out of {nb}")));
        }
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); groups * heads * q * k];
        for g in 0..groups {
            let bk = &buckets[g * q * k..(g + 1) * q * k];
            for h in 0..heads {
                let o = &mut out[(g * heads + h) * q * k..(g * heads + h + 1) * q * k];
                for (ov, &b) in o.iter_mut().zip(bk) {
                    *ov = tv[b * heads + h];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![groups, heads, q, k], out),
            Op::BiasGather { table, buckets, q, k },
            &[table],
        ))
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<T>) -> Result<Var> {
        if hard.len() != self.value(soft).numel() {
            return Err(shape_err("straight_through: value count mismatch".into()));
        }
        let t = Tensor::from_parts(self.shape(soft).to_vec(), hard);
        Ok(self.push(t, Op::StraightThrough { soft }, &[soft]))
    }

    /// `-ln Binomial(count; n, p) / n`, continuous in `count` through the log-gamma extension.
    pub fn binomial_nll(&mut self, count: Var, n: usize, p: f64) -> Result<Var> {
        if self.value(count).numel() != 1 {
            return Err(shape_err("binomial_nll expects a scalar count".into()));
        }
        if n == 0 || !(p > 0.0 && p < 1.0) {
            return Err(Error::Invalid(format!("binomial_nll needs n > 0 and p in (0,1), got n={n}, p={p}")));
        }
        let k = self.value(count).item().f64().clamp(0.0, n as f64);
        let nf = n as f64;
        let log_pmf = ln_gamma(nf + 1.0) - ln_gamma(k + 1.0) - ln_gamma(nf - k + 1.0)
            + k * p.ln()
            + (nf - k) * (1.0 - p).ln();
        Ok(self.push(Tensor::scalar(T::of(-log_pmf / nf)), Op::BinomialNll { count, n, p }, &[count]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `root`; gradients accumulate on trainable leaves.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!("backward root must be scalar, got {:?}", self.shape(root))));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    #[allow(clippy::needless_range_loop)]
    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, shared_b, batch, m, k, n } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    // dA = dC @ Bᵀ
                    if shared_b {
                        gemm_acc(batch * m, n, k, g, false, bv, !trans_b, ga, T::one());
                    } else {
                        for t in 0..batch {
                            gemm_acc(
                                m,
                                n,
                                k,
                                &g[t * m * n..],
                                false,
                                &bv[t * k * n..],
                                !trans_b,
                                &mut ga[t * m * k..(t + 1) * m * k],
                                T::one(),
                            );
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    let (rows, cnt) = if shared_b { (batch * m, 1) } else { (m, batch) };
                    for t in 0..cnt {
                        let (ao, go, bo) = (t * m * k, t * m * n, t * k * n);
                        if trans_b {
                            // dB[n,k] = dCᵀ @ A
                            gemm_acc(n, rows, k, &g[go..], true, &av[ao..], false, &mut gb[bo..bo + k * n], T::one());
                        } else {
                            // dB[k,n] = Aᵀ @ dC
                            gemm_acc(k, rows, n, &av[ao..], true, &g[go..], false, &mut gb[bo..bo + k * n], T::one());
                        }
                    }
                }
            }
            &Op::Add { a, b } | &Op::Mul { a, b } => {
                let is_mul = matches!(node.op, Op::Mul { .. });
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let strides = broadcast_strides(sa, sb).expect("validated in forward");
                let bv = nodes[b.0].value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    if !is_mul {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    } else {
                        for_each_broadcast_row(sa, &strides, |o, s, len, st| {
                            for j in 0..len {
                                ga[o + j] += g[o + j] * bv[s + j * st];
                            }
                        });
                    }
                }
                let av = nodes[a.0].value.data();
                if let Some(gb) = slot(nodes, grads, b) {
                    for_each_broadcast_row(sa, &strides, |o, s, len, st| {
                        for j in 0..len {
                            let d = if is_mul { g[o + j] * av[o + j] } else { g[o + j] };
                            gb[s + j * st] += d;
                        }
                    });
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
                }
            }
            &Op::Relu(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, &gy), &yv) in ga.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *x += gy;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, &gy), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * yv * (T::one() - yv);
                    }
                }
            }
            &Op::ClampMin { a, min } => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > min {
                            *x += gy;
                        }
                    }
                }
            }
            &Op::Softmax1(a) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                        softmax_row_backward(yr, gr, dr);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let w = gv.len();
                let nf = T::of(w as f64);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, (&ir, (xr, gr))) in inv_rms.iter().zip(xv.chunks(w).zip(g.chunks(w))).enumerate() {
                        let dot: T = (0..w).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let c = ir * ir * ir * dot / nf;
                        let out = &mut gx[r * w..(r + 1) * w];
                        for j in 0..w {
                            out[j] += ir * gv[j] * gr[j] - xr[j] * c;
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (&ir, (xr, gr)) in inv_rms.iter().zip(xv.chunks(w).zip(g.chunks(w))) {
                        for j in 0..w {
                            gg[j] += gr[j] * xr[j] * ir;
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Permute { a, perm } => {
                let out_shape = node.value.shape();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                if let Some(ga) = slot(nodes, grads, *a) {
                    permute_into(g, out_shape, &inv, ga, true);
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::WeightedSum { a, weights } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(weights).for_each(|(x, &w)| *x += g[0] * w);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = nodes[logits.0].value.last_dim();
                let scale = g[0] / T::of(*count as f64);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (x, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *x += p * scale;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.last_dim();
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &y) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let w = node.value.last_dim();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (o, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            for (x, &y) in ga[r * w..(r + 1) * w].iter_mut().zip(&g[o * w..(o + 1) * w]) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::SegmentMean { a, segment, counts } => {
                let w = node.value.last_dim();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, s) in segment.iter().enumerate() {
                        let Some(s) = *s else { continue };
                        let inv = T::one() / T::of(counts[s] as f64);
                        for (x, &y) in ga[r * w..(r + 1) * w].iter_mut().zip(&g[s * w..(s + 1) * w]) {
                            *x += y * inv;
                        }
                    }
                }
            }
            Op::BiasGather { table, buckets, q, k } => {
                let heads = nodes[table.0].value.shape()[1];
                let qk = q * k;
                let groups = buckets.len() / qk;
                if let Some(gt) = slot(nodes, grads, *table) {
                    for grp in 0..groups {
                        let bk = &buckets[grp * qk..(grp + 1) * qk];
                        for h in 0..heads {
                            let gr = &g[(grp * heads + h) * qk..(grp * heads + h + 1) * qk];
                            for (&b, &y) in bk.iter().zip(gr) {
                                gt[b * heads + h] += y;
                            }
                        }
                    }
                }
            }
            &Op::StraightThrough { soft } => {
                if let Some(gs) = slot(nodes, grads, soft) {
                    gs.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            &Op::BinomialNll { count, n, p } => {
                let k = nodes[count.0].value.item().f64().clamp(0.0, n as f64);
                let nf = n as f64;
                let d = (digamma(k + 1.0) - digamma(nf - k + 1.0) - p.ln() + (1.0 - p).ln()) / nf;
                if let Some(gc) = slot(nodes, grads, count) {
                    gc[0] += g[0] * T::of(d);
                }
            }
        }
    }
}

fn slot<'a, T: Float>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}
