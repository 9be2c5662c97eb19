//! Shared test oracles and generators.
//!
//! The eigensolver here is a plain cyclic Jacobi iteration over dense f64
//! symmetric matrices, so singular values and polar factors can be checked
//! against a path that shares no code with the library's SVD.

#![allow(dead_code)]

use mass::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching eigenvector
/// columns.
pub fn jacobi_eigh(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i][j] * m[i][j];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i][i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

/// `A^T A` in f64.
pub fn gram(a: &Matrix) -> Vec<Vec<f64>> {
    let n = a.cols();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..a.rows() {
                acc += a.get(k, i) as f64 * a.get(k, j) as f64;
            }
            g[i][j] = acc;
        }
    }
    g
}

/// Singular values via the Gram eigenvalues, descending.
pub fn singular_values_oracle(a: &Matrix) -> Vec<f64> {
    let (eigenvalues, _) = jacobi_eigh(&gram(a));
    eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect()
}

/// Nearest column-orthonormal factor via `M (M^T M)^{-1/2}` computed from
/// the Jacobi eigendecomposition. Requires full column rank.
pub fn polar_oracle(a: &Matrix) -> Vec<Vec<f64>> {
    let (eigenvalues, vecs) = jacobi_eigh(&gram(a));
    let n = a.cols();
    // inv_sqrt = V diag(lambda^{-1/2}) V^T
    let mut inv_sqrt = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (k, &l) in eigenvalues.iter().enumerate() {
                assert!(l > 1e-12, "polar oracle needs full column rank");
                acc += vecs[k][i] * vecs[k][j] / l.sqrt();
            }
            inv_sqrt[i][j] = acc;
        }
    }
    let mut q = vec![vec![0.0; n]; a.rows()];
    for (r, row) in q.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a.get(r, k) as f64 * inv_sqrt[k][c];
            }
            *slot = acc;
        }
    }
    q
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..1.0))
}

pub fn max_abs_entry_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}
