//! Synthetic Gaussian-mixture densities and mode-discovery benchmarks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceConfig, ParticleBatch, SolverConfig};
use crate::net::VelocityField;
use crate::rng::{self, SimRng};

/// Default discovery radius in units of the mode's standard deviation.
pub const DEFAULT_RADIUS_MULT: f64 = 3.0;

const LAYOUT_ATTEMPTS: usize = 100_000;

/// Isotropic Gaussian mixture `Σ w_i N(μ_i, σ_i² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    /// `N × d`
    pub means: Array2<f64>,
    pub scales: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Flat Dirichlet draw.
    Random,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Means uniform in `[-4, 4]^d` with `σ_i ~ U[0.25, 0.35]`, rejected until 6σ-separated.
    Random,
    /// Means equally spaced on a radius-5 circle in the first two coordinates, `σ = 0.3`.
    Circle,
}

impl GmmSpec {
    pub fn new(means: Array2<f64>, scales: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = means.nrows();
        if n == 0 || means.ncols() == 0 {
            return Err(Error::invalid("a mixture needs at least one mode of positive dimension"));
        }
        if scales.len() != n || weights.len() != n {
            return Err(Error::invalid("means, scales and weights must have one entry per mode"));
        }
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("mode scales must be positive"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("mixture weights must be a probability vector"));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mode means must be finite"));
        }
        Ok(GmmSpec { means, scales, weights })
    }

    pub fn modes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `log Σ w_i N(x; μ_i, (σ_i² + sigma_t²) I)`.
    pub fn log_density(&self, x: ArrayView1<f64>, sigma_t: f64) -> f64 {
        let (logs, _) = self.component_logs(x, sigma_t);
        logsumexp(&logs)
    }

    fn component_logs(&self, x: ArrayView1<f64>, sigma_t: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim() as f64;
        let mut logs = Vec::with_capacity(self.modes());
        let mut vars = Vec::with_capacity(self.modes());
        for (i, mu) in self.means.rows().into_iter().enumerate() {
            let var = self.scales[i] * self.scales[i] + sigma_t * sigma_t;
            let r2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            logs.push(self.weights[i].ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r2 / var);
            vars.push(var);
        }
        (logs, vars)
    }
}

fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn flat_dirichlet(rng: &mut SimRng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let mut w: Vec<f64> = draws.iter().map(|x| x / total).collect();
    // push the rounding residue into the largest weight so the sum is 1 to ~1 ulp
    let resid = 1.0 - w.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
    w[imax] += resid;
    w
}

pub fn make_random_gmm(seed: u64, n: usize, d: usize, weights: WeightMode, layout: Layout) -> Result<GmmSpec> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("need at least one mode and one dimension"));
    }
    let mut rng = rng::seeded(seed);
    let (means, scales) = match layout {
        Layout::Circle => {
            if d < 2 {
                return Err(Error::invalid("circle layout needs d >= 2"));
            }
            let mut means = Array2::zeros((n, d));
            for i in 0..n {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                means[[i, 0]] = 5.0 * a.cos();
                means[[i, 1]] = 5.0 * a.sin();
            }
            (means, vec![0.3; n])
        }
        Layout::Random => {
            let scales: Vec<f64> = (0..n).map(|_| rng.random_range(0.25..0.35)).collect();
            let min_sep = 6.0 * scales.iter().copied().fold(0.0, f64::max);
            let mut means = Array2::<f64>::zeros((n, d));
            let mut placed = 0;
            let mut attempts = 0;
            while placed < n {
                if attempts == LAYOUT_ATTEMPTS {
                    return Err(Error::Layout { modes: n, attempts });
                }
                attempts += 1;
                let cand: Array1<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
                let ok = (0..placed).all(|j| {
                    let r2: f64 = cand.iter().zip(means.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    r2.sqrt() >= min_sep
                });
                if ok {
                    means.row_mut(placed).assign(&cand);
                    placed += 1;
                }
            }
            (means, scales)
        }
    };
    let w = match weights {
        WeightMode::Uniform => vec![1.0 / n as f64; n],
        WeightMode::Random => flat_dirichlet(&mut rng, n),
    };
    GmmSpec::new(means, scales, w)
}

/// Eight modes on a radius-4 circle with `σ = 0.1` and equal weights.
///
/// The construction is deterministic; `seed` is accepted for interface symmetry.
pub fn make_source_8gauss(_seed: u64) -> GmmSpec {
    let n = 8;
    let means = Array2::from_shape_fn((n, 2), |(i, c)| {
        let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        4.0 * if c == 0 { a.cos() } else { a.sin() }
    });
    GmmSpec::new(means, vec![0.1; n], vec![1.0 / n as f64; n]).expect("valid construction")
}

/// The mode-finding target: ten randomly placed, randomly weighted 2D modes.
pub const TOY_TARGET_SEED: u64 = 1;

pub fn toy_target() -> GmmSpec {
    make_random_gmm(TOY_TARGET_SEED, 10, 2, WeightMode::Random, Layout::Random).expect("pinned seed lays out")
}

/// Uniform ten-mode circle used with the true score.
pub fn circle_target() -> GmmSpec {
    make_random_gmm(0, 10, 2, WeightMode::Uniform, Layout::Circle).expect("circle layout")
}

pub fn gmm_sample(spec: &GmmSpec, rng: &mut SimRng, n: usize) -> Array2<f64> {
    let d = spec.dim();
    let mut out = Array2::zeros((n, d));
    for r in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = spec.modes() - 1;
        for (i, &w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = i;
                break;
            }
        }
        for c in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            out[[r, c]] = spec.means[[comp, c]] + spec.scales[comp] * z;
        }
    }
    out
}

/// `∇ₓ log Σ w_i N(x; μ_i, (σ_i² + sigma_t²) I)` with log-sum-exp responsibilities.
pub fn gmm_noised_score(spec: &GmmSpec, x: ArrayView1<f64>, sigma_t: f64) -> Array1<f64> {
    let (logs, vars) = spec.component_logs(x, sigma_t);
    let lse = logsumexp(&logs);
    let mut score = Array1::zeros(spec.dim());
    for (i, mu) in spec.means.rows().into_iter().enumerate() {
        let r = (logs[i] - lse).exp();
        if r == 0.0 {
            continue;
        }
        for c in 0..spec.dim() {
            score[c] += r * (mu[c] - x[c]) / vars[i];
        }
    }
    score
}

/// Hessian of the noised log-density applied to `u`.
///
/// With per-component scores `s_i` and responsibilities `r_i`:
/// `H u = Σ r_i (s_i (s_i·u) − u/v_i) − s (s·u)`.
pub fn gmm_noised_hvp(spec: &GmmSpec, x: ArrayView1<f64>, sigma_t: f64, u: ArrayView1<f64>) -> Array1<f64> {
    let (logs, vars) = spec.component_logs(x, sigma_t);
    let lse = logsumexp(&logs);
    let d = spec.dim();
    let mut score = Array1::<f64>::zeros(d);
    let mut out = Array1::<f64>::zeros(d);
    for (i, mu) in spec.means.rows().into_iter().enumerate() {
        let r = (logs[i] - lse).exp();
        if r == 0.0 {
            continue;
        }
        let si: Array1<f64> = (0..d).map(|c| (mu[c] - x[c]) / vars[i]).collect();
        let su = si.dot(&u);
        for c in 0..d {
            out[c] += r * (si[c] * su - u[c] / vars[i]);
            score[c] += r * si[c];
        }
    }
    let su = score.dot(&u);
    out - score * su
}

/// Number of modes `i` for which some sample has `μ_i` as nearest mean and lies within `radius_mult·σ_i`.
pub fn count_modes(samples: ArrayView2<f64>, spec: &GmmSpec, radius_mult: f64) -> usize {
    let mut found = vec![false; spec.modes()];
    for s in samples.rows() {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, mu) in spec.means.rows().into_iter().enumerate() {
            let r2: f64 = s.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            if r2 < best.1 {
                best = (i, r2);
            }
        }
        if best.0 != usize::MAX && best.1.sqrt() <= radius_mult * spec.scales[best.0] {
            found[best.0] = true;
        }
    }
    found.iter().filter(|&&f| f).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub k: usize,
    pub trials: usize,
    pub modes_mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub modes_std: f64,
    pub modes_max: usize,
    pub counts: Vec<usize>,
}

impl BenchResult {
    pub fn from_counts(k: usize, counts: Vec<usize>) -> Self {
        let n = counts.len();
        let mean = counts.iter().sum::<usize>() as f64 / n.max(1) as f64;
        let std = if n > 1 { (counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        BenchResult { k, trials: n, modes_mean: mean, modes_std: std, modes_max: counts.iter().copied().max().unwrap_or(0), counts }
    }
}

/// What generates the terminal samples of a trial.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    /// Learned field; sources drawn from `source`.
    Flow { field: &'a VelocityField, source: &'a GmmSpec },
    /// Closed-form score of the target mixture itself.
    TrueScore,
}

/// One trial: draw `k` sources from the trial stream, sample, return terminal points.
pub fn run_trial(
    model: Model<'_>,
    target: &GmmSpec,
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
    k: usize,
    trial_seed: u64,
) -> Result<ParticleBatch> {
    let mut trial_rng = rng::stream(scfg.seed, trial_seed);
    match model {
        Model::Flow { field, source } => {
            let x0 = ParticleBatch::new(gmm_sample(source, &mut trial_rng, k), 0.0);
            guidance::sample_flow_terminal(field, &x0, gcfg, scfg)
        }
        Model::TrueScore => guidance::sample_ideal_score_with(target, gcfg, scfg, k, &mut trial_rng),
    }
}

/// Mode-discovery trials over `seeds`, run in parallel on the current rayon pool.
///
/// Each trial's randomness comes from `rng::stream(scfg.seed, seed)`, so the
/// per-trial counts are independent of scheduling.
pub fn run_mode_trials(
    model: Model<'_>,
    target: &GmmSpec,
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
    k: usize,
    seeds: &[u64],
    radius_mult: f64,
) -> Result<BenchResult> {
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one trial"));
    }
    if !(radius_mult > 0.0) {
        return Err(Error::invalid("radius multiplier must be positive"));
    }
    let counts = seeds
        .par_iter()
        .enumerate()
        .map(|(trial, &seed)| {
            let out = run_trial(model, target, gcfg, scfg, k, seed).map_err(|e| Error::Trial { trial, source: Box::new(e) })?;
            Ok(count_modes(out.points.view(), target, radius_mult))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(BenchResult::from_counts(k, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub noise_levels: Vec<f64>,
    pub strengths: Vec<f64>,
    /// `cells[i][j]` is noise level `i`, strength `j`.
    pub cells: Vec<Vec<BenchResult>>,
}

impl SweepGrid {
    /// Highest mean over all cells with `(noise_level, strength, result)`.
    pub fn best(&self) -> (f64, f64, &BenchResult) {
        let mut best: Option<(f64, f64, &BenchResult)> = None;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if best.is_none_or(|b| cell.modes_mean > b.2.modes_mean) {
                    best = Some((self.noise_levels[i], self.strengths[j], cell));
                }
            }
        }
        best.expect("non-empty grid")
    }
}

/// True-score mode discovery over a noise-level × strength grid.
#[allow(clippy::too_many_arguments)]
pub fn sweep_heatmap(
    gmm: &GmmSpec,
    noise_levels: &[f64],
    strengths: &[f64],
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
    k: usize,
    seeds: &[u64],
    radius_mult: f64,
) -> Result<SweepGrid> {
    if noise_levels.is_empty() || strengths.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    let mut cells = Vec::with_capacity(noise_levels.len());
    for &lam in noise_levels {
        let mut row = Vec::with_capacity(strengths.len());
        for &w in strengths {
            let g = GuidanceConfig { strength: w, ..gcfg.clone() };
            let s = SolverConfig { noise_level: lam, ..scfg.clone() };
            row.push(run_mode_trials(Model::TrueScore, gmm, &g, &s, k, seeds, radius_mult)?);
        }
        cells.push(row);
    }
    Ok(SweepGrid { noise_levels: noise_levels.to_vec(), strengths: strengths.to_vec(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn circle_uniform_construction() {
        let g = make_random_gmm(1, 10, 2, WeightMode::Uniform, Layout::Circle).unwrap();
        assert!(g.weights.iter().all(|&w| w == 0.1));
        for i in 0..10 {
            let a = 2.0 * std::f64::consts::PI * i as f64 / 10.0;
            assert!((g.means[[i, 0]] - 5.0 * a.cos()).abs() < 1e-15);
            assert!((g.means[[i, 1]] - 5.0 * a.sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn random_layout_is_separated_and_reproducible() {
        let a = make_random_gmm(11, 10, 2, WeightMode::Random, Layout::Random).unwrap();
        let b = make_random_gmm(11, 10, 2, WeightMode::Random, Layout::Random).unwrap();
        assert_eq!(a, b);
        let smax = a.scales.iter().copied().fold(0.0, f64::max);
        for i in 0..10 {
            for j in (i + 1)..10 {
                let r = ((a.means[[i, 0]] - a.means[[j, 0]]).powi(2) + (a.means[[i, 1]] - a.means[[j, 1]]).powi(2)).sqrt();
                assert!(r >= 6.0 * smax);
            }
        }
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn impossible_layout_errors() {
        // 200 modes of σ≥0.25 cannot be 1.5 apart inside [-4,4]²
        assert!(matches!(make_random_gmm(0, 200, 2, WeightMode::Uniform, Layout::Random), Err(Error::Layout { .. })));
    }

    #[test]
    fn eight_gaussians() {
        let s = make_source_8gauss(0);
        assert!(s.weights.iter().all(|&w| w == 0.125));
        for r in s.means.rows() {
            assert!((r.dot(&r).sqrt() - 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn standard_gaussian_score() {
        let g = GmmSpec::new(array![[0.0, 0.0]], vec![1.0], vec![1.0]).unwrap();
        let x = array![0.7, -1.3];
        let s = gmm_noised_score(&g, x.view(), 0.0);
        assert!((s[0] + 0.7).abs() < 1e-15 && (s[1] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn symmetric_midpoint_score_has_no_axis_component() {
        let g = GmmSpec::new(array![[-2.0, 0.0], [2.0, 0.0]], vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let s = gmm_noised_score(&g, array![0.0, 0.3].view(), 0.2);
        assert!(s[0].abs() < 1e-15);
    }

    #[test]
    fn count_modes_cases() {
        let g = toy_target();
        assert_eq!(count_modes(g.means.view(), &g, 3.0), 10);
        assert_eq!(count_modes(Array2::<f64>::zeros((0, 2)).view(), &g, 3.0), 0);
        let same = Array2::from_shape_fn((5, 2), |(_, c)| g.means[[0, c]]);
        assert_eq!(count_modes(same.view(), &g, 3.0), 1);
    }

    #[test]
    fn bench_result_stats() {
        let r = BenchResult::from_counts(3, vec![2, 3, 1]);
        assert_eq!(r.modes_mean, 2.0);
        assert_eq!(r.modes_std, 1.0);
        assert_eq!(r.modes_max, 3);
        assert_eq!(BenchResult::from_counts(3, vec![2]).modes_std, 0.0);
    }
}
