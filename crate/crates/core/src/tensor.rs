//! Dense row-major tensors and the forward kernels used by the tape.
//!
//! A [`Tensor`] is a plain value. Gradient bookkeeping (the `requires_grad`
//! flag and the accumulated gradient) lives on the tape node that owns the
//! tensor, see [`crate::graph`].

use std::fmt;

use crate::scalar::{s, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index error in {op}: index {index} out of range for {len} rows")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Contract {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(shape_err("new", format!("{shape:?} holds no data")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), n], data)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Empty `0 x cols` matrix.
    pub fn empty_rows(cols: usize) -> Self {
        Self {
            shape: vec![0, cols],
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum_all() / s(self.data.len() as f64)
    }

    fn require_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_rank2("matmul")?;
        let (k2, n) = other.require_rank2("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: {m}x{k} . {k2}x{n}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.data,
            (k as isize, 1),
            &other.data,
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_rank2("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&self, bias: &Self) -> Result<Self> {
        let (m, n) = self.require_rank2("add_row_vector")?;
        if bias.numel() != n {
            return Err(shape_err(
                "add_row_vector",
                format!("bias of {} for {n} columns", bias.numel()),
            ));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        self.masked_softmax_rows(None)
    }

    /// Row softmax over the allowed columns only.
    ///
    /// Column `j` of row `i` is allowed when `i == j` or `col_mask[j] != 0`;
    /// the allowed weight is `exp(s_ij) * col_mask[j]` (the diagonal weight is 1).
    /// With `col_mask = None` every column is allowed. Disallowed entries are 0.
    pub fn masked_softmax_rows(&self, col_mask: Option<&[T]>) -> Result<Self> {
        let (m, n) = self.require_rank2("softmax_rows")?;
        if let Some(g) = col_mask {
            if g.len() != n {
                return Err(shape_err(
                    "masked_softmax_rows",
                    format!("mask of {} for {n} columns", g.len()),
                ));
            }
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            let weight = |j: usize| -> T {
                match col_mask {
                    Some(g) if j != i => g[j],
                    _ => T::one(),
                }
            };
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if weight(j) != T::zero() && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                // Only reachable for an empty row or non-square masked input.
                continue;
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let w = weight(j);
                if w != T::zero() {
                    let e = if w == T::one() {
                        (v - max).exp()
                    } else {
                        (v - max).exp() * w
                    };
                    o[j] = e;
                    total += e;
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn log_softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.require_rank2("log_softmax_rows")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Per-row layer normalisation over the last dimension.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        Ok(self.layer_norm_stats(gain, bias, eps)?.0)
    }

    /// Layer norm returning `(output, normalised input, 1/std per row)`.
    pub(crate) fn layer_norm_stats(
        &self,
        gain: &Self,
        bias: &Self,
        eps: T,
    ) -> Result<(Self, Vec<T>, Vec<T>)> {
        let d = self.cols();
        if gain.numel() != d || bias.numel() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {} / bias {} for last dimension {d}",
                    gain.numel(),
                    bias.numel()
                ),
            ));
        }
        let rows = if d == 0 { 0 } else { self.data.len() / d };
        let mut out = vec![T::zero(); self.data.len()];
        let mut normed = vec![T::zero(); self.data.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn: T = s(d as f64);
        for r in 0..rows {
            let x = &self.data[r * d..(r + 1) * d];
            let mean = x.iter().copied().sum::<T>() / dn;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let xh = (x[j] - mean) * inv;
                normed[r * d + j] = xh;
                out[r * d + j] = xh * gain.data[j] + bias.data[j];
            }
        }
        Ok((
            Self {
                shape: self.shape.clone(),
                data: out,
            },
            normed,
            rstd,
        ))
    }

    /// Rows `indices` of a matrix, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (m, n) = self.require_rank2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Self {
            shape: vec![indices.len(), n],
            data,
        })
    }

    /// Copy of `self` with row `indices[k]` replaced by row `k` of `src`.
    pub fn scatter_rows(&self, indices: &[usize], src: &Self) -> Result<Self> {
        let (m, n) = self.require_rank2("scatter_rows")?;
        let (sm, sn) = src.require_rank2("scatter_rows")?;
        if sn != n || sm != indices.len() {
            return Err(shape_err(
                "scatter_rows",
                format!("{sm}x{sn} source for {} indices into {m}x{n}", indices.len()),
            ));
        }
        check_unique(indices, m, "scatter_rows")?;
        let mut data = self.data.clone();
        for (k, &i) in indices.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&src.data[k * n..(k + 1) * n]);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let n = parts.first().map(|p| p.cols()).unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, pn) = p.require_rank2("concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", format!("{pn} vs {n} columns")));
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, n],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let m = parts.first().map(|p| p.rows()).unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.require_rank2("concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("{pm} vs {m} rows")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.require_rank2("slice_cols")?;
        if start + len > n {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Ok(Self {
            shape: vec![m, len],
            data,
        })
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.require_rank2("slice_rows")?;
        if start + len > m {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        Ok(Self {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Sum of each row, as an `m x 1` column.
    pub fn sum_rows(&self) -> Result<Self> {
        let (m, n) = self.require_rank2("sum_rows")?;
        let data = (0..m)
            .map(|i| self.data[i * n..(i + 1) * n].iter().copied().sum())
            .collect();
        Ok(Self {
            shape: vec![m, 1],
            data,
        })
    }
}

pub(crate) fn check_unique(indices: &[usize], len: usize, op: &'static str) -> Result<()> {
    let mut seen = vec![false; len];
    for &i in indices {
        if i >= len {
            return Err(TensorError::Index { op, index: i, len });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(contract(op, format!("duplicate index {i}")));
        }
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c: T = s(GELU_C);
    let a: T = s(GELU_A);
    let half: T = s(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c: T = s(GELU_C);
    let a: T = s(GELU_A);
    let half: T = s(0.5);
    let three: T = s(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Max-norm relative difference `|a - b|_inf / max(|b|_inf, floor)`.
pub fn rel_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_diff on mismatched shapes");
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        num = num.max((x.to_f64_lossy() - y.to_f64_lossy()).abs());
        den = den.max(y.to_f64_lossy().abs());
    }
    num / den.max(1e-30)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(a.matmul(&id).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let x = m(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0]]);
        let y = x.softmax_rows().unwrap();
        for j in 0..3 {
            assert!((y.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(y.at(1, 0), 1.0);
        assert!(y.at(1, 1) < 1e-30);
        assert!(y.all_finite());
    }

    #[test]
    fn masked_softmax_keeps_diagonal() {
        let x = m(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]]);
        let g = [1.0, 0.0, 0.0];
        let y = x.masked_softmax_rows(Some(&g)).unwrap();
        // row 1 may attend to column 0 and itself
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((y.at(1, 0) - e1 / (e1 + e2)).abs() < 1e-15);
        assert_eq!(y.at(1, 2), 0.0);
        assert_eq!(y.at(0, 1), 0.0);
        assert_eq!(y.at(0, 0), 1.0);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::full(&[2, 4], 3.25);
        let y = x
            .layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_fixed_point() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn gather_out_of_range() {
        let x = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(
            x.gather_rows(&[0, 3]),
            Err(TensorError::Index { index: 3, .. })
        ));
    }

    #[test]
    fn scatter_duplicate_is_contract_violation() {
        let x = Tensor::<f32>::zeros(&[3, 2]);
        let src = Tensor::<f32>::ones(&[2, 2]);
        assert!(matches!(
            x.scatter_rows(&[1, 1], &src),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
