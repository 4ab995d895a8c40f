//! Dense row-major tensors and the matrix kernels the workflows are built on.
//!
//! Every product accumulates in the canonical order (output row, output
//! column, inner index) so repeated runs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidTensor("tensor needs at least one extent".into()));
        }
        if let Some(pos) = shape.iter().position(|&e| e == 0) {
            return Err(Error::InvalidTensor(format!("extent {pos} of {shape:?} is zero")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!("shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![S::zero(); n])
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::InvalidTensor(format!("row {i} has {} entries, expected {n_cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![n_rows, n_cols], data)
    }

    /// Convenience for literals in f64; converts into `S`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::from_f64_lossy(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn require_matrix(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidTensor(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    fn require_rank3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::InvalidTensor(format!("expected a rank-3 tensor, got shape {:?}", self.shape))),
        }
    }

    /// Row-major element access by multi-index; panics when out of range.
    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    /// Explicit transposed copy of a matrix.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Copy of slice `b` along the leading axis of a rank-3 tensor, as a matrix.
    pub fn sample(&self, b: usize) -> Result<Self> {
        let (n, r, c) = self.require_rank3()?;
        if b >= n {
            return Err(Error::InvalidTensor(format!("sample {b} out of range for batch {n}")));
        }
        let start = b * r * c;
        Self::new(vec![r, c], self.data[start..start + r * c].to_vec())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc + x)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::Shape { lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(self.data.iter().zip(&other.data).fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul(self, rhs)
    }

    pub fn frob_norm_sq(&self) -> S {
        frob_norm_sq(self.data())
    }
}

/// `c[i][j] = Σ_l a[i][l]·b[l][j]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.require_matrix()?;
    let (k2, n) = b.require_matrix()?;
    if k != k2 {
        return Err(Error::Shape { lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for l in 0..k {
                acc += a.data[i * k + l] * b.data[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Per-sample weight gradient of a linear layer: `G[d][p] = Σ_t dy[t][d]·x[t][p]`.
///
/// Same accumulation order as `matmul(dyᵀ, x)`, so the two agree bitwise.
pub fn per_sample_grad<S: Scalar>(dy: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, d) = dy.require_matrix()?;
    let (t2, p) = x.require_matrix()?;
    if t != t2 {
        return Err(Error::Shape { lhs: dy.shape.clone(), rhs: x.shape.clone() });
    }
    let mut out = vec![S::zero(); d * p];
    outer_accumulate(&mut out, dy.data(), x.data(), t, d, p);
    Tensor::new(vec![d, p], out)
}

/// `out[i][j] (+)= Σ_t lhs[t][i]·rhs[t][j]` for row-major `lhs: t×rows`, `rhs: t×cols`.
///
/// Each output element is accumulated in a local starting from the existing
/// value of `out`, looping over `t` innermost. Callers that tile along `t`
/// and call this once per tile in ascending order reproduce the untiled sum
/// bit for bit.
pub(crate) fn outer_accumulate<S: Scalar>(out: &mut [S], lhs: &[S], rhs: &[S], t: usize, rows: usize, cols: usize) {
    debug_assert_eq!(out.len(), rows * cols);
    debug_assert_eq!(lhs.len(), t * rows);
    debug_assert_eq!(rhs.len(), t * cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = out[i * cols + j];
            for s in 0..t {
                acc += lhs[s * rows + i] * rhs[s * cols + j];
            }
            out[i * cols + j] = acc;
        }
    }
}

/// Sum of squared entries.
pub fn frob_norm_sq<S: Scalar>(values: &[S]) -> S {
    values.iter().fold(S::zero(), |acc, &v| acc + v * v)
}
