use ndarray::Array2;

use super::SymMatrix;
use crate::error::{Error, Result};

/// Largest order accepted by the Jacobi eigensolver by default.
pub const SMALL_MATRIX_CAP: usize = 64;

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition `M = V diag(values) Vᵀ`, values ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, in the order of `values`.
    pub vectors: Array2<f64>,
}

impl SymEigen {
    pub fn reconstruct(&self) -> Array2<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            scaled.column_mut(j).mapv_inplace(|v| v * self.values[j]);
        }
        scaled.dot(&self.vectors.t())
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices up to [`SMALL_MATRIX_CAP`].
pub fn sym_eigen(m: &SymMatrix) -> Result<SymEigen> {
    sym_eigen_capped(m, SMALL_MATRIX_CAP)
}

pub fn sym_eigenvalues(m: &SymMatrix) -> Result<Vec<f64>> {
    Ok(sym_eigen(m)?.values)
}

pub fn sym_eigenvalues_capped(m: &SymMatrix, cap: usize) -> Result<Vec<f64>> {
    Ok(sym_eigen_capped(m, cap)?.values)
}

fn off_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += a[[i, j]] * a[[i, j]];
        }
    }
    (2.0 * s).sqrt()
}

fn sym_eigen_capped(m: &SymMatrix, cap: usize) -> Result<SymEigen> {
    let n = m.order();
    if n > cap {
        return Err(Error::invalid(format!("matrix order {n} exceeds the eigensolver cap {cap}")));
    }
    let mut a = m.as_array().clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = f64::EPSILON * scale.max(f64::MIN_POSITIVE);

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(SymEigen { values, vectors })
}
