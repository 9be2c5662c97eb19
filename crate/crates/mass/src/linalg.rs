//! Dense matrix primitives: thin SVD, truncation, polar orthogonalization,
//! cosine similarity, softmax over negated residuals, and subspace
//! projection residuals.
//!
//! Storage is row-major `f32`; all reductions accumulate in `f64`.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data length".into(),
                expected: (rows * cols).to_string(),
                got: data.len().to_string(),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{rows}x{cols} matrix data"),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f32]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product with f64 accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul inner dimension".into(),
                expected: self.cols.to_string(),
                got: other.rows.to_string(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0f64;
                for k in 0..self.cols {
                    acc += self.get(i, k) as f64 * other.get(k, j) as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        Ok(out)
    }

    /// Matrix-vector product, f64 in and out.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "matvec vector length".into(),
                expected: self.cols.to_string(),
                got: x.len().to_string(),
            });
        }
        let mut out = vec![0.0f64; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0f64;
            for j in 0..self.cols {
                acc += self.get(i, j) as f64 * x[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Transposed matrix-vector product: `self^T x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch {
                context: "matvec_t vector length".into(),
                expected: self.rows.to_string(),
                got: x.len().to_string(),
            });
        }
        let mut out = vec![0.0f64; self.cols];
        for j in 0..self.cols {
            let mut acc = 0.0f64;
            for i in 0..self.rows {
                acc += self.get(i, j) as f64 * x[i];
            }
            out[j] = acc;
        }
        Ok(out)
    }

    /// Columnwise concatenation of matrices with equal row counts.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput {
            context: "hconcat".into(),
        })?;
        let rows = first.rows;
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for m in parts {
            if m.rows != rows {
                return Err(Error::DimensionMismatch {
                    context: "hconcat row count".into(),
                    expected: rows.to_string(),
                    got: m.rows.to_string(),
                });
            }
            for i in 0..rows {
                for j in 0..m.cols {
                    out.set(i, offset + j, m.get(i, j));
                }
            }
            offset += m.cols;
        }
        Ok(out)
    }

    /// First `k` columns.
    pub fn left_columns(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    /// Columns `[start, start + count)`.
    pub fn column_block(&self, start: usize, count: usize) -> Matrix {
        Matrix::from_fn(self.rows, count, |i, j| self.get(i, start + j))
    }

    /// `self + scale * other`, elementwise in f64.
    pub fn add_scaled(&self, other: &Matrix, scale: f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                context: "add_scaled shape".into(),
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 + scale * *b as f64) as f32)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| (*x as f64 * s) as f32).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j) as f64)
    }

    fn from_na(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] as f32)
    }
}

/// Thin singular value decomposition `M = U diag(S) V^T` with
/// `r = min(rows, cols)` retained pairs, `S` non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: Matrix,
    pub s: Vec<f32>,
    pub v: Matrix,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows;
        let n = self.v.rows;
        let r = self.s.len();
        Matrix::from_fn(m, n, |i, j| {
            let mut acc = 0.0f64;
            for k in 0..r {
                acc += self.u.get(i, k) as f64 * self.s[k] as f64 * self.v.get(j, k) as f64;
            }
            acc as f32
        })
    }
}

/// Thin SVD with a fixed sign convention: within each singular pair, the
/// largest-magnitude entry of U's column is non-negative (ties broken by
/// the lowest row index). Pairs are ordered by non-increasing singular
/// value, so repeated runs over the same input are bit-identical.
pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    if !m.is_finite() {
        return Err(Error::NonFinite {
            context: "thin_svd input".into(),
        });
    }
    let r = m.rows.min(m.cols);
    // An exactly-zero matrix has arbitrary singular vectors; pin them to the
    // leading canonical basis so downstream merges stay deterministic.
    if m.data.iter().all(|&x| x == 0.0) {
        return Ok(ThinSvd {
            u: Matrix::identity(m.rows).left_columns(r),
            s: vec![0.0; r],
            v: Matrix::identity(m.cols).left_columns(r),
        });
    }
    let svd = m.to_na().svd(true, true);
    let u_na = svd.u.as_ref().expect("u requested");
    let vt_na = svd.v_t.as_ref().expect("v_t requested");

    // nalgebra returns singular values in non-increasing order already;
    // re-sort defensively with a stable order so ties stay deterministic.
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });

    let mut u = Matrix::zeros(m.rows, r);
    let mut v = Matrix::zeros(m.cols, r);
    let mut s = vec![0.0f32; r];
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = svd.singular_values[src] as f32;
        // Sign convention from U's column.
        let mut best_row = 0;
        let mut best_abs = -1.0f64;
        for i in 0..m.rows {
            let a = u_na[(i, src)].abs();
            if a > best_abs {
                best_abs = a;
                best_row = i;
            }
        }
        let flip = if u_na[(best_row, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m.rows {
            u.set(i, dst, (u_na[(i, src)] * flip) as f32);
        }
        for j in 0..m.cols {
            v.set(j, dst, (vt_na[(src, j)] * flip) as f32);
        }
    }
    Ok(ThinSvd { u, s, v })
}

/// Keep the first `k` singular pairs.
pub fn truncate_svd(svd: &ThinSvd, k: usize) -> Result<ThinSvd> {
    let r = svd.rank();
    if k == 0 || k > r {
        return Err(Error::InvalidRank { k, max: r });
    }
    Ok(ThinSvd {
        u: svd.u.left_columns(k),
        s: svd.s[..k].to_vec(),
        v: svd.v.left_columns(k),
    })
}

pub const RANK_DEFICIENCY_CUTOFF: f64 = 1e-8;

/// Nearest matrix with orthonormal columns in Frobenius norm (polar factor):
/// for `M = P S Q^T` via thin SVD, returns `P Q^T`.
pub fn orthogonalize(m: &Matrix) -> Result<Matrix> {
    if m.cols > m.rows {
        return Err(Error::DimensionMismatch {
            context: "orthogonalize requires cols <= rows".into(),
            expected: format!("cols <= {}", m.rows),
            got: m.cols.to_string(),
        });
    }
    let svd = m.to_na().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio <= RANK_DEFICIENCY_CUTOFF {
        return Err(Error::RankDeficient {
            ratio,
            cutoff: RANK_DEFICIENCY_CUTOFF,
        });
    }
    let q = svd.u.as_ref().expect("u") * svd.v_t.as_ref().expect("v_t");
    Ok(Matrix::from_na(&q))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity `a.b / (|a||b|)`; rejects zero-norm inputs.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_similarity".into(),
            expected: a.len().to_string(),
            got: b.len().to_string(),
        });
    }
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm {
            context: "cosine_similarity".into(),
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `w_i = exp(-r_i / t) / sum_j exp(-r_j / t)`, stabilized by shifting all
/// residuals by the minimum before exponentiation.
pub fn softmax_neg(residuals: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if residuals.is_empty() {
        return Err(Error::EmptyInput {
            context: "softmax_neg residuals".into(),
        });
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if !residuals.iter().all(|r| r.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax_neg residuals".into(),
        });
    }
    let rmin = residuals.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = residuals
        .iter()
        .map(|r| (-(r - rmin) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Euclidean residual `|z - V V^T z|` of `z` after projection onto the
/// column span of `V` (assumed orthonormal).
pub fn project_residual(z: &[f64], v: &Matrix) -> Result<f64> {
    if z.len() != v.rows {
        return Err(Error::DimensionMismatch {
            context: "project_residual".into(),
            expected: v.rows.to_string(),
            got: z.len().to_string(),
        });
    }
    let coeffs = v.matvec_t(z)?;
    let proj = v.matvec(&coeffs)?;
    let mut acc = 0.0f64;
    for i in 0..z.len() {
        let d = z[i] - proj[i];
        acc += d * d;
    }
    Ok(acc.sqrt())
}
