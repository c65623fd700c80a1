use ndarray::{Array1, Array2, ArrayView1};

use super::SymMatrix;
use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// Lower-triangular factor `M + jitter·I = G Gᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Plain factorization; `None` when a pivot is not strictly positive.
    pub fn exact(m: &SymMatrix) -> Option<Self> {
        factor(m.as_array(), 0.0).map(|lower| Cholesky { lower, jitter: 0.0 })
    }

    /// Like [`Cholesky::exact`] but reports failure as a singular kernel.
    pub fn strict(m: &SymMatrix) -> Result<Self> {
        Self::exact(m).ok_or_else(|| singular(m.order(), 0.0))
    }

    /// Factorizes, adding diagonal jitter when needed.
    ///
    /// Jitter starts at `1e-12·trace/order` and grows tenfold up to
    /// `1e-6·trace/order`; beyond that the matrix is reported as singular.
    pub fn with_jitter(m: &SymMatrix) -> Result<Self> {
        if let Some(c) = Self::exact(m) {
            return Ok(c);
        }
        let n = m.order();
        let scale = m.trace() / n as f64;
        let singular = || singular(n, JITTER_MAX * scale.max(0.0));
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(singular());
        }
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            if let Some(lower) = factor(m.as_array(), jitter) {
                return Ok(Cholesky { lower, jitter });
            }
            rel *= 10.0;
        }
        Err(singular())
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `(G Gᵀ) x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.lower.nrows();
        let g = &self.lower;
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= g[[i, k]] * y[k];
            }
            y[i] = s / g[[i, i]];
        }
        let mut x = Array1::zeros(n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= g[[k, i]] * x[k];
            }
            x[i] = s / g[[i, i]];
        }
        x
    }

    /// Inverse by solving against the identity columns, symmetrized.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.lower.nrows();
        let mut inv = Array2::zeros((n, n));
        let mut e = Array1::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(e.view());
            inv.column_mut(j).assign(&col);
        }
        SymMatrix::from_upper(n, |i, j| 0.5 * (inv[[i, j]] + inv[[j, i]]))
    }
}

fn singular(order: usize, max_jitter: f64) -> Error {
    Error::SingularKernel { order, max_jitter, hint: "the set contains (near-)duplicates; use the soft objective" }
}

fn factor(m: &Array2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = m.nrows();
    // pivots at rounding level mean the matrix is singular, not merely ill-conditioned
    let max_diag = m.diag().iter().fold(0.0f64, |a, &v| a.max(v.abs())) + jitter;
    let floor = n as f64 * f64::EPSILON * max_diag;
    let mut g = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]] + jitter;
        for k in 0..j {
            d -= g[[j, k]] * g[[j, k]];
        }
        if !(d > floor) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        g[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= g[[i, k]] * g[[j, k]];
            }
            g[[i, j]] = s / djj;
        }
    }
    Some(g)
}

/// `log det M` from the Cholesky diagonal, under the jitter policy.
pub fn cholesky_logdet(m: &SymMatrix) -> Result<f64> {
    Ok(Cholesky::with_jitter(m)?.logdet())
}
