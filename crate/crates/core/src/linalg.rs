//! Symmetric eigendecomposition (cyclic Jacobi) for the small dense
//! matrices used by PCA, classical MDS and numerical-rank checks.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `j` of the row-major `n×n` matrix is the eigenvector for `values[j]`.
    pub vectors: Vec<f64>,
    pub n: usize,
}

impl SymEigen {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.vectors[i * self.n + j]).collect()
    }
}

pub fn is_symmetric(a: &[f64], n: usize, tol: f64) -> bool {
    (0..n).all(|i| (0..i).all(|j| (a[i * n + j] - a[j * n + i]).abs() <= tol))
}

pub fn sym_eigen(a: &[f64], n: usize) -> Result<SymEigen> {
    if a.len() != n * n {
        return Err(Error::shape("sym_eigen", &[a.len()], &[n, n]));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    if !is_symmetric(a, n, 1e-9 * scale) {
        return Err(Error::Asymmetric);
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 * scale * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (newj, &oldj) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + newj] = v[i * n + oldj];
        }
    }
    Ok(SymEigen { values, vectors, n })
}

/// Singular values of a row-major `rows×cols` matrix, descending.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    // Gram matrix on the smaller side.
    let (n, gram) = if cols <= rows {
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] = (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum();
            }
        }
        (cols, g)
    } else {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|c| a[i * cols + c] * a[j * cols + c]).sum();
            }
        }
        (rows, g)
    };
    let eig = sym_eigen(&gram, n)?;
    Ok(eig.values.iter().map(|&l| libm::sqrt(l.max(0.0))).collect())
}

/// Count of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(a: &[f64], rows: usize, cols: usize, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(a, rows, cols)?;
    let max = sv.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * max).count())
}
