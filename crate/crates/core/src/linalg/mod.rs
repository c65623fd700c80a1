//! Small dense linear algebra for the kernel machinery and the coupling solvers.
//!
//! Everything here works on matrices of at most a few dozen rows: pairwise
//! distances between particles, log-determinants of similarity kernels, their
//! spectra, and the assignment/transport problems used to pair minibatches.

mod assignment;
mod cholesky;
mod eigen;
mod sinkhorn;

pub use assignment::{hungarian, Assignment};
pub use cholesky::{cholesky_logdet, Cholesky};
pub use eigen::{sym_eigen, sym_eigenvalues, sym_eigenvalues_capped, SymEigen, SMALL_MATRIX_CAP};
pub use sinkhorn::{sinkhorn, TransportPlan, DEFAULT_SINKHORN_ITERS, MARGINAL_TOL};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// A square matrix whose stored entries are exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Wraps `data`, rejecting non-square or asymmetric input.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (r, c) = data.dim();
        if r == 0 || r != c {
            return Err(Error::invalid(format!("symmetric matrix must be square and non-empty, got {r}x{c}")));
        }
        for i in 0..r {
            for j in (i + 1)..r {
                if data[[i, j]] != data[[j, i]] {
                    return Err(Error::invalid(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(SymMatrix { data })
    }

    /// Builds a matrix from its upper triangle; `f(i, j)` is called for `i <= j` only.
    pub fn from_upper(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(order >= 1, "order must be positive");
        let mut data = Array2::zeros((order, order));
        for i in 0..order {
            for j in i..order {
                let v = f(i, j);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        SymMatrix { data }
    }

    pub fn identity(order: usize) -> Self {
        Self::from_upper(order, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn order(&self) -> usize {
        self.data.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }

    /// `self + shift * I`.
    pub fn add_diagonal(&self, shift: f64) -> SymMatrix {
        let mut data = self.data.clone();
        data.diag_mut().mapv_inplace(|v| v + shift);
        SymMatrix { data }
    }

    /// Entrywise map; `f` must not break symmetry (it is applied to both triangles).
    pub fn map(&self, f: impl Fn(usize, usize, f64) -> f64) -> SymMatrix {
        let n = self.order();
        SymMatrix::from_upper(n, |i, j| f(i, j, self.data[[i, j]]))
    }

    /// Strictly-upper-triangle entries in row-major order.
    pub fn upper_entries(&self) -> Vec<f64> {
        let n = self.order();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.data[[i, j]]);
            }
        }
        out
    }
}

/// Squared Euclidean distance matrix of the rows of `points` (K×d).
pub fn pairwise_sq_dists(points: ArrayView2<f64>) -> Result<SymMatrix> {
    let (k, d) = points.dim();
    if k == 0 || d == 0 {
        return Err(Error::invalid(format!("need at least one point of positive dimension, got {k}x{d}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite coordinate in point set"));
    }
    Ok(SymMatrix::from_upper(k, |i, j| {
        if i == j {
            return 0.0;
        }
        points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    }))
}

/// Cross squared distances `C_ij = ‖a_i − b_j‖²`, the cost matrix for couplings.
pub fn pairwise_sq_dists_between(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() || a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("cross distances need non-empty sets of equal dimension"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite coordinate in point set"));
    }
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum()))
}

/// Median of the strictly-upper-triangle entries; mean of the middle pair for even counts.
pub fn median_upper(d: &SymMatrix) -> Result<f64> {
    if d.order() < 2 {
        return Err(Error::Degenerate("median of an order-1 matrix has no off-diagonal entries".into()));
    }
    let mut v = d.upper_entries();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
