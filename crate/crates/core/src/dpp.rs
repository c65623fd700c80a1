//! Determinantal diversity objective over a set of points.
//!
//! The kernel is a Gaussian similarity with a median-normalized bandwidth,
//!
//! ```text
//! L_ij = exp(-h * |F(x_i) - F(x_j)|² / med(upper(D)))
//! ```
//!
//! optionally reweighted by per-point quality, `L_q = L ⊙ q qᵀ`. The set
//! log-likelihood is `log det L - log det (L + I)`; the soft objective is the
//! expected cardinality `tr(I - (L + I)⁻¹)`, which stays finite when `L` is
//! singular.
//!
//! Gradients treat the median bandwidth as a constant.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{median_upper, pairwise_sq_dists, sym_eigenvalues, Cholesky, SymMatrix};

/// Map from sample space into the space where similarity is measured.
pub trait FeatureMap: Send + Sync {
    fn name(&self) -> &str;

    fn map(&self, x: ArrayView1<f64>) -> Array1<f64>;

    /// `(∂F/∂x)ᵀ cot` at `x`.
    fn vjp(&self, x: ArrayView1<f64>, cot: ArrayView1<f64>) -> Array1<f64>;

    /// Marks maps whose `vjp` is the identity, so callers can skip the pass.
    fn is_identity(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeature;

impl FeatureMap for IdentityFeature {
    fn name(&self) -> &str {
        "identity"
    }

    fn map(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.to_owned()
    }

    fn vjp(&self, _x: ArrayView1<f64>, cot: ArrayView1<f64>) -> Array1<f64> {
        cot.to_owned()
    }

    fn is_identity(&self) -> bool {
        true
    }
}

/// Shared handle to a feature map.
#[derive(Clone)]
pub struct Feature(pub Arc<dyn FeatureMap>);

impl Feature {
    pub fn identity() -> Self {
        Feature(Arc::new(IdentityFeature))
    }

    fn features(&self, points: ArrayView2<f64>) -> Array2<f64> {
        if self.0.is_identity() {
            return points.to_owned();
        }
        let rows: Vec<Array1<f64>> = points.rows().into_iter().map(|r| self.0.map(r)).collect();
        let width = rows.first().map_or(0, |r| r.len());
        let mut out = Array2::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        out
    }

    fn pull_back(&self, points: ArrayView2<f64>, feature_grad: Array2<f64>) -> Array2<f64> {
        if self.0.is_identity() {
            return feature_grad;
        }
        let mut out = Array2::zeros(points.raw_dim());
        for i in 0..points.nrows() {
            out.row_mut(i).assign(&self.0.vjp(points.row(i), feature_grad.row(i)));
        }
        out
    }
}

impl Default for Feature {
    fn default() -> Self {
        Feature::identity()
    }
}

impl fmt::Debug for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Feature({})", self.0.name())
    }
}

/// Minimum-quality floor and in-distribution radius for source estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityParams {
    pub rho: f64,
    pub epsilon: f64,
}

impl QualityParams {
    pub fn new(rho: f64, epsilon: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::invalid(format!("quality radius must be positive, got {rho}")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid(format!("minimum quality must lie in (0, 1), got {epsilon}")));
        }
        Ok(QualityParams { rho, epsilon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// `log det L - log det (L + I)`
    #[default]
    Exact,
    /// `tr(I - (L + I)⁻¹)`
    Soft,
}

#[derive(Debug, Clone)]
pub struct DppKernel {
    /// The kernel, with quality already applied when `quality` is set.
    pub l: SymMatrix,
    pub bandwidth: f64,
    pub h: f64,
    pub quality: Option<Array1<f64>>,
}

impl DppKernel {
    pub fn k(&self) -> usize {
        self.l.order()
    }
}

#[derive(Debug, Clone)]
pub struct LikelihoodReport {
    pub det_ratio: f64,
    /// `-inf` when the kernel is singular.
    pub loglik: f64,
    pub eigenvalues: Vec<f64>,
    pub soft_cardinality: f64,
}

/// Median of the upper-triangle squared feature distances.
pub fn median_bandwidth(points: ArrayView2<f64>, feature: &Feature) -> Result<f64> {
    let f = feature.features(points);
    let d = pairwise_sq_dists(f.view())?;
    median_upper(&d)
}

pub fn build_kernel(points: ArrayView2<f64>, h: f64, feature: &Feature) -> Result<DppKernel> {
    if points.nrows() < 2 {
        return Err(Error::invalid(format!("a kernel needs at least 2 points, got {}", points.nrows())));
    }
    let bw = median_bandwidth(points, feature)?;
    kernel_with_bandwidth(points, h, feature, bw)
}

/// Kernel with an externally fixed bandwidth.
pub fn kernel_with_bandwidth(points: ArrayView2<f64>, h: f64, feature: &Feature, bandwidth: f64) -> Result<DppKernel> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("kernel spread must be positive, got {h}")));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Degenerate("zero bandwidth: all points coincide".into()));
    }
    let f = feature.features(points);
    let d = pairwise_sq_dists(f.view())?;
    let l = d.map(|_, _, dij| (-h * dij / bandwidth).exp());
    Ok(DppKernel { l, bandwidth, h, quality: None })
}

/// `q_i = 1` inside radius `rho`, else `max(eps, exp(-(|x̂₀|² - rho²)))`.
pub fn quality_vector(x0_estimates: ArrayView2<f64>, params: &QualityParams) -> Array1<f64> {
    let r2 = params.rho * params.rho;
    x0_estimates
        .rows()
        .into_iter()
        .map(|row| {
            let n2 = row.dot(&row);
            if n2 <= r2 {
                1.0
            } else {
                params.epsilon.max((-(n2 - r2)).exp())
            }
        })
        .collect()
}

pub fn apply_quality(kernel: &DppKernel, q: ArrayView1<f64>) -> Result<DppKernel> {
    if q.len() != kernel.k() {
        return Err(Error::invalid(format!("quality vector has length {}, kernel order {}", q.len(), kernel.k())));
    }
    if q.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::invalid("quality entries must lie in (0, 1]"));
    }
    let l = kernel.l.map(|i, j, v| v * q[i] * q[j]);
    let quality = match &kernel.quality {
        Some(prev) => Some(prev * &q),
        None => Some(q.to_owned()),
    };
    Ok(DppKernel { l, bandwidth: kernel.bandwidth, h: kernel.h, quality })
}

/// Likelihood of the full set under the kernel, by two routes.
///
/// `det_ratio` comes from the spectrum, `loglik` from Cholesky factors of `L`
/// and `L + I`. A kernel that is not numerically positive definite yields
/// `det_ratio = 0` and `loglik = -inf`.
pub fn likelihood_report(kernel: &DppKernel) -> Result<LikelihoodReport> {
    let eigenvalues = sym_eigenvalues(&kernel.l)?;
    let shifted = Cholesky::exact(&kernel.l.add_diagonal(1.0))
        .ok_or_else(|| Error::invalid("L + I is not positive definite; kernel entries are invalid"))?;
    let inv_shifted = shifted.inverse();
    let soft_cardinality = kernel.k() as f64 - inv_shifted.trace();

    let (det_ratio, loglik) = match Cholesky::exact(&kernel.l) {
        Some(c) if eigenvalues[0] > 0.0 => {
            let ratio = eigenvalues.iter().map(|&l| l / (1.0 + l)).product();
            (ratio, c.logdet() - shifted.logdet())
        }
        _ => (0.0, f64::NEG_INFINITY),
    };
    Ok(LikelihoodReport { det_ratio, loglik, eigenvalues, soft_cardinality })
}

/// `∂objective/∂L` (symmetric) for a kernel whose entries already include quality.
fn objective_weights(l: &SymMatrix, objective: Objective) -> Result<SymMatrix> {
    let shifted = Cholesky::exact(&l.add_diagonal(1.0)).ok_or_else(|| Error::invalid("L + I is not positive definite"))?.inverse();
    match objective {
        Objective::Exact => {
            let inv = Cholesky::strict(l)?.inverse();
            Ok(inv.map(|i, j, v| v - shifted.get(i, j)))
        }
        Objective::Soft => {
            let sq = shifted.as_array().dot(shifted.as_array());
            Ok(SymMatrix::from_upper(l.order(), |i, j| 0.5 * (sq[[i, j]] + sq[[j, i]])))
        }
    }
}

/// Analytic gradient of the objective with respect to the points.
///
/// The median bandwidth is computed from `points` and held fixed; `quality`
/// is treated as a constant.
pub fn grad_loglik(
    points: ArrayView2<f64>,
    h: f64,
    feature: &Feature,
    quality: Option<ArrayView1<f64>>,
    objective: Objective,
) -> Result<Array2<f64>> {
    let bw = median_bandwidth(points, feature)?;
    grad_loglik_with_bandwidth(points, h, feature, quality, objective, bw)
}

pub fn grad_loglik_with_bandwidth(
    points: ArrayView2<f64>,
    h: f64,
    feature: &Feature,
    quality: Option<ArrayView1<f64>>,
    objective: Objective,
    bandwidth: f64,
) -> Result<Array2<f64>> {
    let mut kernel = kernel_with_bandwidth(points, h, feature, bandwidth)?;
    if let Some(q) = quality {
        kernel = apply_quality(&kernel, q)?;
    }
    let w = objective_weights(&kernel.l, objective)?;
    let f = feature.features(points);
    let k = f.nrows();
    // d obj / d y_i = sum_j 2 W_ij dL_ij/dy_i, with dL_ij/dy_i = -2h/bw * L_ij (y_i - y_j)
    let scale = -4.0 * h / bandwidth;
    let mut grad = Array2::zeros(f.raw_dim());
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let c = scale * w.get(i, j) * kernel.l.get(i, j);
            if c == 0.0 {
                continue;
            }
            for col in 0..f.ncols() {
                grad[[i, col]] += c * (f[[i, col]] - f[[j, col]]);
            }
        }
    }
    Ok(feature.pull_back(points, grad))
}

/// Particle-guidance potentials `Φ_i = Σ_j L_ij` and the per-particle
/// gradients `∇_{x_i} Φ_i` (each particle differentiates its own potential).
pub fn pg_potential_grad(points: ArrayView2<f64>, h: f64, feature: &Feature) -> Result<(Array1<f64>, Array2<f64>)> {
    let kernel = build_kernel(points, h, feature)?;
    let f = feature.features(points);
    let k = f.nrows();
    let potentials: Array1<f64> = (0..k).map(|i| (0..k).map(|j| kernel.l.get(i, j)).sum()).collect();
    let scale = -2.0 * h / kernel.bandwidth;
    let mut grad = Array2::zeros(f.raw_dim());
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let c = scale * kernel.l.get(i, j);
            for col in 0..f.ncols() {
                grad[[i, col]] += c * (f[[i, col]] - f[[j, col]]);
            }
        }
    }
    Ok((potentials, feature.pull_back(points, grad)))
}
