// Define-by-run reverse-mode tape.
//
// Every op appends a node holding its forward value and whatever the backward
// rule needs. `backward` walks the nodes in reverse creation order, which is a
// valid topological order because inputs always exist before the op that
// consumes them.
//
// Gradients are only propagated into nodes flagged `needs_grad`: leaves created
// with `requires_grad`, retained attention matrices, and anything downstream of
// either.

use std::borrow::Cow;

use super::kernels;
use super::tensor::{Scalar, Tensor};
use super::NumericError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query position may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every position sees every position.
    Full,
    /// The first `prefix` positions see each other bidirectionally; every later
    /// position sees the whole prefix plus itself and earlier positions.
    /// `Prefix(0)` is the plain causal mask.
    Prefix(usize),
}

impl AttentionMask {
    pub fn causal() -> Self {
        AttentionMask::Prefix(0)
    }

    #[inline]
    pub fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttentionMask::Full => true,
            AttentionMask::Prefix(p) => {
                if query < p {
                    key < p
                } else {
                    key <= query
                }
            }
        }
    }
}

/// Fill value for masked attention logits. Finite so stored values stay finite.
pub const MASK_FILL: f64 = -1.0e9;

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Mask { x: Var, mask: AttentionMask },
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Mask { .. } => "mask",
            Op::Softmax(_) => "softmax_rows",
            Op::LogSoftmax(_) => "log_softmax_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A retained post-softmax attention matrix for one (layer, head).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetainedAttention {
    pub layer: usize,
    pub head: usize,
    pub var: Var,
}

pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    grads: Vec<Option<Vec<T>>>,
    retain_attention: bool,
    retained: Vec<RetainedAttention>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), retain_attention: false, retained: Vec::new() }
    }

    /// Tape that keeps every attention matrix registered through
    /// [`Tape::retain`] and computes its gradient in `backward`.
    pub fn with_attention_retention() -> Self {
        Tape { retain_attention: true, ..Self::new() }
    }

    pub fn retains_attention(&self) -> bool {
        self.retain_attention
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn retained(&self) -> &[RetainedAttention] {
        &self.retained
    }

    /// Leaf borrowing an existing tensor (model parameters).
    pub fn param(&mut self, t: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Leaf owning its tensor.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Registers an attention matrix for retention. No-op unless the tape was
    /// built with [`Tape::with_attention_retention`].
    pub fn retain(&mut self, layer: usize, head: usize, v: Var) {
        if self.retain_attention {
            self.nodes[v.0].needs_grad = true;
            self.retained.push(RetainedAttention { layer, head, var: v });
        }
    }

    fn push_raw(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite(op.name()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(Cow::Owned(value), op, needs_grad))
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat(&self, v: Var, op: &str) -> Result<(usize, usize), NumericError> {
        match self.shape_of(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(NumericError::Shape(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(NumericError::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(NumericError::Dimension {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b])
    }

    fn check_broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericError> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NumericError::Dimension { op, left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    /// Elementwise sum. `b` broadcasts over `a` when its shape equals the
    /// trailing dimensions of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.check_broadcast(a, b, "add")?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o = *o + y;
            }
        }
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product with the same trailing-dimension broadcast as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.check_broadcast(a, b, "mul")?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o = *o * y;
            }
        }
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericError> {
        let c = T::from_f64c(c);
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().map(|&x| x * c).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, c), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(NumericError::Dimension {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.shape_of(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::from_f64c(LN_EPS);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Row lookup into a `V × d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let (v, d) = self.mat(table, "embedding")?;
        if ids.is_empty() {
            return Err(NumericError::Shape("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericError::Index { index: bad, bound: v });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Replaces disallowed attention logits with [`MASK_FILL`].
    pub fn apply_mask(&mut self, x: Var, mask: AttentionMask) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "apply_mask")?;
        let fill = T::from_f64c(MASK_FILL);
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                if !mask.allows(i, j) {
                    out[i * n + j] = fill;
                }
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::Mask { x, mask }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            kernels::softmax_in_place(row);
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "log_softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let lse = kernels::log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmax(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "transpose")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericError> {
        let xv = self.value(x).data();
        let s = xv.iter().copied().sum::<T>() / T::from_usize(xv.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "mean_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n];
        for row in xv.chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let mf = T::from_usize(m).unwrap();
        out.iter_mut().for_each(|o| *o = *o / mf);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericError> {
        let (m, v) = self.mat(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(NumericError::Shape(format!(
                "cross_entropy: {m} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericError::Index { index: bad, bound: v });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            total = total + lse - row[t];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let loss = total / T::from_usize(m).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(NumericError::Shape(format!(
                "slice_cols [{start}, {}) out of width {n}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in xv.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let (m, _) = self.mat(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_cols")?;
            if pm != m {
                return Err(NumericError::Dimension {
                    op: "concat_cols",
                    left: self.shape_of(parts[0]).to_vec(),
                    right: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let (_, n) = self.mat(parts[0], "concat_rows")?;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_rows")?;
            if pn != n {
                return Err(NumericError::Dimension {
                    op: "concat_rows",
                    left: self.shape_of(parts[0]).to_vec(),
                    right: vec![pm, pn],
                });
            }
            m += pm;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = self.mat(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(NumericError::Shape("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(NumericError::Index { index: bad, bound: m });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            &[x],
        )
    }

    /// Reverse pass from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let value = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = value(a).dims2();
                let (_, n) = value(b).dims2();
                let (av, bv) = (value(a).data(), value(b).data());
                acc(nodes, grads, a, |ga| kernels::matmul_bt_acc(g, bv, m, n, k, ga));
                acc(nodes, grads, b, |gb| kernels::matmul_at_acc(av, g, m, k, n, gb));
            }
            &Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let (m, k) = value(a).dims2();
                let (n, _) = value(b).dims2();
                let (av, bv) = (value(a).data(), value(b).data());
                acc(nodes, grads, a, |ga| kernels::matmul(g, bv, m, n, k, ga));
                acc(nodes, grads, b, |gb| kernels::matmul_at_acc(g, av, m, n, k, gb));
            }
            &Op::Add(a, b) => {
                acc(nodes, grads, a, |ga| kernels::axpy(ga, g));
                acc(nodes, grads, b, |gb| {
                    for chunk in g.chunks_exact(gb.len()) {
                        kernels::axpy(gb, chunk);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (value(a).data(), value(b).data());
                acc(nodes, grads, a, |ga| {
                        for (gc, dc) in ga.chunks_exact_mut(bv.len()).zip(g.chunks_exact(bv.len())) {
                            for ((o, &d), &y) in gc.iter_mut().zip(dc).zip(bv) {
                                *o = *o + d * y;
                            }
                        }
                });
                acc(nodes, grads, b, |gb| {
                        let w = gb.len();
                        for (ac, dc) in av.chunks_exact(w).zip(g.chunks_exact(w)) {
                            for ((o, &d), &x) in gb.iter_mut().zip(dc).zip(ac) {
                                *o = *o + d * x;
                            }
                        }
                });
            }
            &Op::Scale(a, c) => {
                acc(nodes, grads, a, |ga| {
                    for (o, &d) in ga.iter_mut().zip(g) {
                        *o = *o + d * c;
                    }
                });
            }
            &Op::Gelu(a) => {
                let xv = value(a).data();
                acc(nodes, grads, a, |ga| {
                    for ((o, &d), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *o = *o + d * kernels::gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = rstd.len().max(1);
                let n = value(x).len() / n;
                let gv = value(gamma).data();
                acc(nodes, grads, beta, |gb| {
                    for row in g.chunks_exact(n) {
                        kernels::axpy(gb, row);
                    }
                });
                acc(nodes, grads, gamma, |gg| {
                    for (row, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((o, &d), &h) in gg.iter_mut().zip(row).zip(hrow) {
                            *o = *o + d * h;
                        }
                    }
                });
                acc(nodes, grads, x, |gx| {
                    let nf = T::from_usize(n).unwrap();
                    for (r, ((gxr, dr), hr)) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dhh = mean_dhh + dh * hr[j];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dhh = mean_dhh / nf;
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            gxr[j] = gxr[j] + rstd[r] * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = value(*table).dims2().1;
                acc(nodes, grads, *table, |gt| {
                    for (k, &id) in ids.iter().enumerate() {
                        kernels::axpy(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            &Op::Mask { x, mask } => {
                let (_, n) = value(x).dims2();
                acc(nodes, grads, x, |gx| {
                    for (idx, (o, &d)) in gx.iter_mut().zip(g).enumerate() {
                        if mask.allows(idx / n, idx % n) {
                            *o = *o + d;
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.dims2().1;
                acc(nodes, grads, x, |gx| {
                    for ((gr, dr), yr) in
                        gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let dot: T = dr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..n {
                            gr[j] = gr[j] + yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.dims2().1;
                acc(nodes, grads, x, |gx| {
                    for ((gr, dr), yr) in
                        gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let total: T = dr.iter().copied().sum();
                        for j in 0..n {
                            gr[j] = gr[j] + dr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let (m, n) = value(x).dims2();
                acc(nodes, grads, x, |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] = gx[r * n + c] + g[c * m + r];
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(nodes, grads, x, |gx| kernels::axpy(gx, g)),
            &Op::Sum(x) => {
                let d = g[0];
                acc(nodes, grads, x, |gx| gx.iter_mut().for_each(|o| *o = *o + d));
            }
            &Op::Mean(x) => {
                let len = value(x).len();
                let d = g[0] / T::from_usize(len).unwrap();
                acc(nodes, grads, x, |gx| gx.iter_mut().for_each(|o| *o = *o + d));
            }
            &Op::MeanRows(x) => {
                let (m, n) = value(x).dims2();
                let mf = T::from_usize(m).unwrap();
                acc(nodes, grads, x, |gx| {
                    for row in gx.chunks_exact_mut(n) {
                        for (o, &d) in row.iter_mut().zip(g) {
                            *o = *o + d / mf;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (m, v) = value(*logits).dims2();
                let scale = g[0] / T::from_usize(m).unwrap();
                acc(nodes, grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let mut p = probs[r * v + j];
                            if j == t {
                                p = p - T::one();
                            }
                            gl[r * v + j] = gl[r * v + j] + p * scale;
                        }
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let (_, n) = value(x).dims2();
                let w = nodes[i].value.dims2().1;
                acc(nodes, grads, x, |gx| {
                    for (row, dr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                        kernels::axpy(&mut row[start..start + w], dr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = nodes[i].value.dims2().1;
                let mut offset = 0;
                for &p in parts {
                    let w = value(p).dims2().1;
                    acc(nodes, grads, p, |gp| {
                        for (row, dr) in gp.chunks_exact_mut(w).zip(g.chunks_exact(n)) {
                            kernels::axpy(row, &dr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = value(p).len();
                    acc(nodes, grads, p, |gp| kernels::axpy(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = value(*x).dims2().1;
                acc(nodes, grads, *x, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        kernels::axpy(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
        }
    }
}

fn acc<T: Scalar>(
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}
