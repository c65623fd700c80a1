use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const DEFAULT_SINKHORN_ITERS: usize = 200;
/// Tolerance on row/column sums of a returned plan.
pub const MARGINAL_TOL: f64 = 1e-6;

const CONVERGED_SHIFT: f64 = 1e-12;

/// Coupling between uniform marginals of sizes `rows` and `cols`.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub marginal_tol: f64,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.plan.nrows()
    }

    pub fn cols(&self) -> usize {
        self.plan.ncols()
    }

    /// Largest deviation of any row or column sum from its uniform target.
    pub fn marginal_error(&self) -> f64 {
        let (n, m) = self.plan.dim();
        let re = self.plan.rows().into_iter().map(|r| (r.sum() - 1.0 / n as f64).abs());
        let ce = self.plan.columns().into_iter().map(|c| (c.sum() - 1.0 / m as f64).abs());
        re.chain(ce).fold(0.0, f64::max)
    }
}

/// Terms this far below the maximum add less than one ulp to the sum.
const NEGLIGIBLE: f64 = -50.0;

/// `log Σ_j exp(a_j + b_j)`
fn logsumexp_sum(a: &[f64], b: &[f64]) -> f64 {
    let mx = a.iter().zip(b).fold(f64::NEG_INFINITY, |m, (x, y)| m.max(x + y));
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x + y - mx;
        if d > NEGLIGIBLE {
            s += d.exp();
        }
    }
    mx + s.ln()
}

/// Entropic OT between uniform marginals, iterated in the log domain.
///
/// Iteration stops after `iters` dual updates or once the row potentials stop
/// moving. Afterwards the plan is rounded onto the transport polytope
/// (rows then columns scaled down, deficit redistributed as a rank-one term),
/// so the marginals hold to rounding error even when the scaling has not
/// fully converged at small `reg`.
pub fn sinkhorn(cost: ArrayView2<f64>, reg: f64, iters: usize) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::invalid("sinkhorn needs a non-empty cost matrix"));
    }
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::invalid(format!("sinkhorn regularization must be positive, got {reg}")));
    }
    if iters == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("sinkhorn costs must be finite"));
    }

    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let scaled = cost.mapv(|c| -c / reg);
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(Error::TransportOverflow { iteration: 0, reg });
    }
    let rows = scaled.as_standard_layout().into_owned();
    let cols = scaled.t().as_standard_layout().into_owned();
    let rows = rows.as_slice().expect("standard layout");
    let cols = cols.as_slice().expect("standard layout");
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    for it in 0..iters {
        // a row update of size δ means that row's mass was off by a factor e^δ
        let mut shift = 0.0f64;
        for i in 0..n {
            let next = log_a - logsumexp_sum(&rows[i * m..(i + 1) * m], &g);
            if it > 0 {
                shift = shift.max((next - f[i]).abs());
            }
            f[i] = next;
        }
        if it > 0 && shift < CONVERGED_SHIFT {
            break;
        }
        for j in 0..m {
            g[j] = log_b - logsumexp_sum(&cols[j * n..(j + 1) * n], &f);
        }
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::TransportOverflow { iteration: it, reg });
        }
    }

    let mut plan = Array2::from_shape_fn((n, m), |(i, j)| (scaled[[i, j]] + f[i] + g[j]).exp());
    round_to_marginals(&mut plan);
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::TransportOverflow { iteration: iters, reg });
    }
    Ok(TransportPlan { plan, marginal_tol: MARGINAL_TOL })
}

fn round_to_marginals(p: &mut Array2<f64>) {
    let (n, m) = p.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    for mut row in p.rows_mut() {
        let s = row.sum();
        if s > a {
            row.mapv_inplace(|v| v * a / s);
        }
    }
    for mut col in p.columns_mut() {
        let s = col.sum();
        if s > b {
            col.mapv_inplace(|v| v * b / s);
        }
    }
    let err_r: Vec<f64> = p.rows().into_iter().map(|r| a - r.sum()).collect();
    let err_c: Vec<f64> = p.columns().into_iter().map(|c| b - c.sum()).collect();
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                p[[i, j]] += err_r[i] * err_c[j] / total;
            }
        }
    }
}
