//! Tape-based dynamic reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: each op computes its value eagerly and
//! records its inputs. Nodes are created in topological order, so
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! Leaves created with [`Graph::param`] require gradients; gradients of
//! interior nodes are dropped once propagated. Calling `backward` twice
//! without [`Graph::zero_grad`] accumulates into the leaf gradients.

use crate::scalar::{s, Scalar};
use crate::tensor::{contract, gelu_grad_scalar, shape_err, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRowVector(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, mask: Option<Var> },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows { x: Var, indices: Vec<usize> },
    ScatterRows { dst: Var, src: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Blend { mask: Var, a: Var, b: Var },
    StraightThrough { soft: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    macs: u64,
    non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            macs: 0,
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push("param", value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any was propagated to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Multiply-accumulate operations performed by `matmul` so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn reset_mac_count(&mut self) {
        self.macs = 0;
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        self.macs += (m * k * value.cols()) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push("matmul", value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push("transpose", value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push("reshape", value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push("add", value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push("sub", value, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push("mul", value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).scale(k);
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push("add_scalar", value, Op::AddScalar(x), rg)
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row_vector(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push("add_row_vector", value, Op::AddRowVector(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let rg = self.rg(&[x]);
        self.push("relu", value, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).gelu();
        let rg = self.rg(&[x]);
        self.push("gelu", value, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_rows()?;
        let rg = self.rg(&[x]);
        Ok(self.push("softmax_rows", value, Op::Softmax { x, mask: None }, rg))
    }

    /// Row softmax where column `j` of row `i != j` is weighted by `mask[j]`.
    ///
    /// The diagonal is always allowed. `mask` holds one value per column and
    /// receives a gradient.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Var) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if xv.rank() != 2 || xv.rows() != xv.cols() {
                return Err(shape_err(
                    "masked_softmax_rows",
                    format!("expected a square score matrix, got {:?}", xv.shape()),
                ));
            }
            xv.masked_softmax_rows(Some(self.value(mask).data()))?
        };
        let rg = self.rg(&[x, mask]);
        Ok(self.push(
            "masked_softmax_rows",
            value,
            Op::Softmax {
                x,
                mask: Some(mask),
            },
            rg,
        ))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).log_softmax_rows()?;
        let rg = self.rg(&[x]);
        Ok(self.push("log_softmax_rows", value, Op::LogSoftmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (value, normed, rstd) =
            self.value(x)
                .layer_norm_stats(self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(indices)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `dst` with rows `indices` overwritten by the rows of `src`.
    pub fn scatter_rows(&mut self, dst: Var, indices: &[usize], src: Var) -> Result<Var> {
        let value = self.value(dst).scatter_rows(indices, self.value(src))?;
        let rg = self.rg(&[dst, src]);
        Ok(self.push(
            "scatter_rows",
            value,
            Op::ScatterRows {
                dst,
                src,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let value = {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&ts)?
        };
        let rg = self.rg(parts);
        Ok(self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let value = {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&ts)?
        };
        let rg = self.rg(parts);
        Ok(self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push("slice_rows", value, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push("slice_cols", value, Op::SliceCols { x, start }, rg))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).sum_rows()?;
        let rg = self.rg(&[x]);
        Ok(self.push("sum_rows", value, Op::SumRows(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_all());
        let rg = self.rg(&[x]);
        self.push("sum_all", value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean_all());
        let rg = self.rg(&[x]);
        self.push("mean_all", value, Op::MeanAll(x), rg)
    }

    /// Row-wise `mask * a + (1 - mask) * b` with a per-row `mask` column.
    ///
    /// Rows with mask exactly 1 (or 0) copy `a` (or `b`) bit-for-bit.
    pub fn blend_rows(&mut self, mask: Var, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (mv, av, bv) = (self.value(mask), self.value(a), self.value(b));
            if av.shape() != bv.shape() || av.rank() != 2 || mv.numel() != av.rows() {
                return Err(shape_err(
                    "blend_rows",
                    format!("mask {:?}, a {:?}, b {:?}", mv.shape(), av.shape(), bv.shape()),
                ));
            }
            let d = av.cols();
            let mut out = Vec::with_capacity(av.numel());
            for (i, &m) in mv.data().iter().enumerate() {
                let (ra, rb) = (av.row(i), bv.row(i));
                if m == T::one() {
                    out.extend_from_slice(ra);
                } else if m == T::zero() {
                    out.extend_from_slice(rb);
                } else {
                    out.extend(ra.iter().zip(rb).map(|(&x, &y)| m * x + (T::one() - m) * y));
                }
            }
            debug_assert_eq!(out.len(), av.rows() * d);
            Tensor::new(av.shape().to_vec(), out)?
        };
        let rg = self.rg(&[mask, a, b]);
        Ok(self.push("blend_rows", value, Op::Blend { mask, a, b }, rg))
    }

    /// Straight-through estimator: forward value `hard`, gradient routed to `soft`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(shape_err(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.value(soft).shape()),
            ));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push("straight_through", hard, Op::StraightThrough { soft }, rg))
    }

    /// Mean cross-entropy of `logits` (one row per sample) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), lv.shape()),
            ));
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract(
                "cross_entropy",
                format!("label {bad} outside 0..{c}"),
            ));
        }
        let ls = lv.log_softmax_rows()?;
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -ls.at(i, l))
            .sum();
        let value = Tensor::scalar(total / s(labels.len().max(1) as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Back-propagates from a scalar `loss` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.check_finite()?;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        // interior grads from a previous call are stale
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        let seed = Tensor::full(self.value(loss).shape(), T::one());
        self.accumulate(loss, &seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &Tensor<T>) {
        if let Some(acc) = slot(&self.nodes, &mut self.grads, v) {
            for (a, &b) in acc.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    fn propagate(&mut self, i: usize, dy: &Tensor<T>) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let dyd = dy.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA += dC . B^T
                    T::gemm(m, n, k, dyd, (n as isize, 1), val(*b).data(), (1, n as isize), T::one(), ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB += A^T . dC
                    T::gemm(k, m, n, val(*a).data(), (1, k as isize), dyd, (n as isize, 1), T::one(), gb);
                }
            }
            Op::Transpose(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    let (r, c) = (dy.rows(), dy.cols());
                    for p in 0..r {
                        for q in 0..c {
                            g[q * r + p] += dyd[p * c + q];
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::AddScalar(x) | Op::StraightThrough { soft: x } => {
                add_into(slot(nodes, grads, *x), dyd);
            }
            Op::Add(a, b) => {
                add_into(slot(nodes, grads, *a), dyd);
                add_into(slot(nodes, grads, *b), dyd);
            }
            Op::Sub(a, b) => {
                add_into(slot(nodes, grads, *a), dyd);
                if let Some(g) = slot(nodes, grads, *b) {
                    for (g, &d) in g.iter_mut().zip(dyd) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = slot(nodes, grads, *a) {
                    for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(val(*b).data()) {
                        *g += d * o;
                    }
                }
                if let Some(g) = slot(nodes, grads, *b) {
                    for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(val(*a).data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    for (g, &d) in g.iter_mut().zip(dyd) {
                        *g += *k * d;
                    }
                }
            }
            Op::AddRowVector(x, bias) => {
                add_into(slot(nodes, grads, *x), dyd);
                let n = dy.cols();
                if let Some(g) = slot(nodes, grads, *bias) {
                    for row in dyd.chunks(n) {
                        for (g, &d) in g.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    for ((g, &d), &v) in g.iter_mut().zip(dyd).zip(val(*x).data()) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    for ((g, &d), &v) in g.iter_mut().zip(dyd).zip(val(*x).data()) {
                        *g += d * gelu_grad_scalar(v);
                    }
                }
            }
            Op::Softmax { x, mask } => {
                softmax_backward(nodes, grads, &nodes[i].value, *x, *mask, dy)
            }
            Op::LogSoftmax(x) => {
                if let Some(g) = slot(nodes, grads, *x) {
                    let y = &nodes[i].value;
                    let n = y.cols();
                    for (r, (yr, dr)) in y.data().chunks(n).zip(dyd.chunks(n)).enumerate() {
                        let total: T = dr.iter().copied().sum();
                        for j in 0..n {
                            g[r * n + j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = dy.cols();
                if let Some(g) = slot(nodes, grads, *gain) {
                    for (xh, dr) in normed.chunks(d).zip(dyd.chunks(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * xh[j];
                        }
                    }
                }
                if let Some(g) = slot(nodes, grads, *bias) {
                    for dr in dyd.chunks(d) {
                        for j in 0..d {
                            g[j] += dr[j];
                        }
                    }
                }
                if let Some(g) = slot(nodes, grads, *x) {
                    let gv = val(*gain).data();
                    let dn: T = s(d as f64);
                    for (r, (xh, dr)) in normed.chunks(d).zip(dyd.chunks(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = dr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dxh = dr[j] * gv[j];
                            g[r * d + j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                let n = dy.cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (k, &r) in indices.iter().enumerate() {
                        for j in 0..n {
                            g[r * n + j] += dyd[k * n + j];
                        }
                    }
                }
            }
            Op::ScatterRows { dst, src, indices } => {
                let n = dy.cols();
                if let Some(g) = slot(nodes, grads, *src) {
                    for (k, &r) in indices.iter().enumerate() {
                        for j in 0..n {
                            g[k * n + j] += dyd[r * n + j];
                        }
                    }
                }
                if let Some(g) = slot(nodes, grads, *dst) {
                    let mut hit = vec![false; dy.rows()];
                    for &r in indices {
                        hit[r] = true;
                    }
                    for (r, h) in hit.iter().enumerate() {
                        if !h {
                            for j in 0..n {
                                g[r * n + j] += dyd[r * n + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let n = dy.cols();
                let mut start = 0;
                for &p in parts {
                    let len = val(p).numel();
                    add_into(slot(nodes, grads, p), &dyd[start * n..start * n + len]);
                    start += val(p).rows();
                }
            }
            Op::ConcatCols(parts) => {
                let n = dy.cols();
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(g) = slot(nodes, grads, p) {
                        for r in 0..dy.rows() {
                            for j in 0..w {
                                g[r * w + j] += dyd[r * n + start + j];
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = dy.cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (k, &d) in dyd.iter().enumerate() {
                        g[start * n + k] += d;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (len, n) = (dy.cols(), val(*x).cols());
                if let Some(g) = slot(nodes, grads, *x) {
                    for r in 0..dy.rows() {
                        for j in 0..len {
                            g[r * n + start + j] += dyd[r * len + j];
                        }
                    }
                }
            }
            Op::SumRows(x) => {
                let n = val(*x).cols();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (r, &d) in dyd.iter().enumerate() {
                        for v in &mut g[r * n..(r + 1) * n] {
                            *v += d;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let d = dy.item();
                if let Some(g) = slot(nodes, grads, *x) {
                    g.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::MeanAll(x) => {
                let d = dy.item() / s(val(*x).numel().max(1) as f64);
                if let Some(g) = slot(nodes, grads, *x) {
                    g.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::Blend { mask, a, b } => {
                let mv = val(*mask).data();
                let d = dy.cols();
                if let Some(g) = slot(nodes, grads, *mask) {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    for (r, gr) in g.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for j in r * d..(r + 1) * d {
                            acc += dyd[j] * (av[j] - bv[j]);
                        }
                        *gr += acc;
                    }
                }
                if let Some(g) = slot(nodes, grads, *a) {
                    for (r, &m) in mv.iter().enumerate() {
                        for j in r * d..(r + 1) * d {
                            g[j] += m * dyd[j];
                        }
                    }
                }
                if let Some(g) = slot(nodes, grads, *b) {
                    for (r, &m) in mv.iter().enumerate() {
                        for j in r * d..(r + 1) * d {
                            g[j] += (T::one() - m) * dyd[j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if let Some(g) = slot(nodes, grads, *logits) {
                    let probs = val(*logits).softmax_rows()?;
                    let c = probs.cols();
                    let k = dy.item() / s(labels.len().max(1) as f64);
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            g[r * c + j] += k * (probs.at(r, j) - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` needs no grad.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
            .data_mut(),
    )
}

fn add_into<T: Scalar>(dst: Option<&mut [T]>, src: &[T]) {
    if let Some(dst) = dst {
        for (a, &b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
}

fn softmax_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    y: &Tensor<T>,
    x: Var,
    mask: Option<Var>,
    dy: &Tensor<T>,
) {
    let n = y.cols();
    let (yd, dyd) = (y.data(), dy.data());
    // per-row <y, dy>
    let dots: Vec<T> = yd
        .chunks(n)
        .zip(dyd.chunks(n))
        .map(|(yr, dr)| yr.iter().zip(dr).map(|(&a, &b)| a * b).sum())
        .collect();
    if let Some(g) = slot(nodes, grads, x) {
        for (r, &dot) in dots.iter().enumerate() {
            for k in r * n..(r + 1) * n {
                g[k] += yd[k] * (dyd[k] - dot);
            }
        }
    }
    let Some(mask) = mask else { return };
    let Some(g) = slot(nodes, grads, mask) else {
        return;
    };
    // d y_ij / d m_j = exp(s_ij - max_i) / Z_i * (delta_ij - y_ij) summed against dy, for i != j
    let sv = &nodes[x.0].value;
    let gv = nodes[mask.0].value.data();
    // Clamp keeps exp finite for masked-out columns whose score dwarfs the row max.
    let cap: T = s(60.0);
    for r in 0..sv.rows() {
        let row = sv.row(r);
        let w = |j: usize| if j == r { T::one() } else { gv[j] };
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if w(j) != T::zero() && v > max {
                max = v;
            }
        }
        let z: T = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| w(j) != T::zero())
            .map(|(j, &v)| (v - max).exp() * w(j))
            .sum();
        for (j, &v) in row.iter().enumerate() {
            if j != r {
                let e = (v - max).min(cap).exp();
                g[j] += e / z * (dyd[r * n + j] - dots[r]);
            }
        }
    }
}

