//! Guided Euler samplers.
//!
//! All samplers share one convention: the diversity term *ascends* the DPP
//! log-likelihood, `ṽ = v + γ(t)·∇ log L`, and Particle Guidance descends its
//! potential, `ṽ = v − γ(t)·∇Φ`. Whenever `γ(t)` is exactly zero the guided
//! update is skipped, so the result is bitwise the unguided Euler step.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bench::{gmm_noised_hvp, gmm_noised_score, GmmSpec};
use crate::dpp::{self, Feature, Objective, QualityParams};
use crate::error::{Error, Result};
use crate::net::{ForwardPass, VelocityField};
use crate::rng::{self, SimRng};

/// Denominator floor for gradient-norm normalization.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBatch {
    /// `k × d`
    pub points: Array2<f64>,
    pub t: f64,
}

impl ParticleBatch {
    pub fn new(points: Array2<f64>, t: f64) -> Self {
        ParticleBatch { points, t }
    }

    pub fn k(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    fn is_finite(&self) -> bool {
        self.points.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    None,
    DiverseFlow,
    ParticleGuidance,
}

/// Variance-exploding noise path `σ(t) = σ_max (σ_min/σ_max)^t`, in flow time
/// (`t = 0` pure noise, `t = 1` data).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VeSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
}

impl Default for VeSchedule {
    fn default() -> Self {
        VeSchedule { sigma_max: 10.0, sigma_min: 0.01 }
    }
}

impl VeSchedule {
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_max * (self.sigma_min / self.sigma_max).powf(t)
    }

    /// Squared diffusion coefficient `g²(t) = dσ²/dτ = 2σ(t)² ln(σ_max/σ_min)`.
    pub fn g2(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        2.0 * s * s * (self.sigma_max / self.sigma_min).ln()
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::invalid("noise schedule needs 0 < sigma_min < sigma_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    SqrtOneMinusT,
    SigmaPath(VeSchedule),
}

impl Schedule {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Schedule::SqrtOneMinusT => (1.0 - t).max(0.0).sqrt(),
            Schedule::SigmaPath(ve) => ve.sigma(t),
        }
    }
}

/// Where a similarity kernel is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSupport {
    /// The current states `x_t`.
    State,
    /// One-step target estimates (`x̂₁` for a flow, the denoised mean for a score model).
    Estimate,
}

/// How `∂x̂₁/∂x_t` enters the composed gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    /// `I + (1 − t)·Jᵀ` through the network.
    Full,
    /// Treat the estimate as moving rigidly with the state.
    Identity,
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub method: Method,
    /// Strength `W ≥ 0`.
    pub strength: f64,
    pub schedule: Schedule,
    pub normalize_by_grad_norm: bool,
    /// Kernel spread `h`.
    pub h: f64,
    pub quality: Option<QualityParams>,
    pub objective: Objective,
    pub pg_kernel_on: KernelSupport,
    /// Kernel support of DiverseFlow under the true score.
    pub score_kernel_on: KernelSupport,
    pub jacobian: JacobianMode,
    pub feature: Feature,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            method: Method::DiverseFlow,
            strength: 2.0,
            schedule: Schedule::SqrtOneMinusT,
            normalize_by_grad_norm: true,
            h: 1.0,
            quality: None,
            objective: Objective::Exact,
            pg_kernel_on: KernelSupport::State,
            score_kernel_on: KernelSupport::State,
            jacobian: JacobianMode::Full,
            feature: Feature::identity(),
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        GuidanceConfig { method: Method::None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::invalid("guidance strength must be finite and nonnegative"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::invalid("kernel spread h must be positive"));
        }
        if let Schedule::SigmaPath(ve) = self.schedule {
            ve.validate()?;
        }
        Ok(())
    }

    /// `W·s(t)`, the numerator of `γ(t)`; zero means the step is unguided.
    fn raw_scale(&self, t: f64) -> f64 {
        if self.method == Method::None {
            return 0.0;
        }
        self.strength * self.schedule.value(t)
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub steps: usize,
    /// `λ ∈ [0, 1]`; only the score sampler injects noise.
    pub noise_level: f64,
    pub seed: u64,
    pub ve: VeSchedule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { steps: 100, noise_level: 0.0, seed: 0, ve: VeSchedule::default() }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("solver needs at least one step"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::invalid("noise level must lie in [0, 1]"));
        }
        self.ve.validate()
    }
}

/// `γ(t) = W·s(t) / max(‖∇‖, 1e-12)` (or `W·s(t)` without normalization).
pub fn gamma(config: &GuidanceConfig, t: f64, grad_norm: f64) -> f64 {
    let raw = config.raw_scale(t);
    if raw == 0.0 {
        return 0.0;
    }
    if config.normalize_by_grad_norm {
        raw / grad_norm.max(GRAD_NORM_FLOOR)
    } else {
        raw
    }
}

/// `x̂₁ = x_t + v(x_t, t)(1 − t)`.
pub fn estimate_x1(batch: &ParticleBatch, field: &VelocityField) -> Result<Array2<f64>> {
    let v = field.forward_batch(batch.points.view(), batch.t)?;
    Ok(&batch.points + &(v * (1.0 - batch.t)))
}

/// `x̂₀ = x_t − v(x_t, t)·t`.
pub fn estimate_x0(batch: &ParticleBatch, field: &VelocityField) -> Result<Array2<f64>> {
    let v = field.forward_batch(batch.points.view(), batch.t)?;
    Ok(&batch.points - &(v * batch.t))
}

fn euler(x: &Array2<f64>, drift: &Array2<f64>, dt: f64) -> Array2<f64> {
    x + &(drift * dt)
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `∇ log L` at `points`, falling back to the soft objective on singular kernels.
///
/// `None` when every point coincides (the kernel has no scale, so there is no
/// direction to push in).
fn dpp_gradient(points: ArrayView2<f64>, gcfg: &GuidanceConfig, quality: Option<&Array1<f64>>) -> Result<Option<Array2<f64>>> {
    let q = quality.map(|q| q.view());
    match dpp::grad_loglik(points, gcfg.h, &gcfg.feature, q, gcfg.objective) {
        Ok(g) => Ok(Some(g)),
        Err(Error::SingularKernel { .. }) => {
            log::debug!("singular kernel of order {}; using the soft objective for this step", points.nrows());
            Ok(Some(dpp::grad_loglik(points, gcfg.h, &gcfg.feature, q, Objective::Soft)?))
        }
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn pg_gradient(points: ArrayView2<f64>, gcfg: &GuidanceConfig) -> Result<Option<Array2<f64>>> {
    match dpp::pg_potential_grad(points, gcfg.h, &gcfg.feature) {
        Ok((_, g)) => Ok(Some(g)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Chain rule through `x̂₁ = x + v(1 − t)`.
fn pull_through_estimate(pass: &ForwardPass<'_>, g: Array2<f64>, t: f64, mode: JacobianMode) -> Result<Array2<f64>> {
    match mode {
        JacobianMode::Identity => Ok(g),
        JacobianMode::Full => {
            let jt = pass.vjp_input(g.view())?;
            Ok(g + &(jt * (1.0 - t)))
        }
    }
}

/// `∇_{x_t} log L(x̂₁(x_t))` for the live rows, and the kernel order.
fn dpp_state_gradient(
    pass: &ForwardPass<'_>,
    x: &Array2<f64>,
    t: f64,
    gcfg: &GuidanceConfig,
    frozen: Option<ArrayView2<f64>>,
) -> Result<Option<(Array2<f64>, usize)>> {
    let k = x.nrows();
    let v = pass.output();
    let x1 = x + &(v * (1.0 - t));
    let (set, order) = match frozen {
        Some(c) if c.nrows() > 0 => (concatenate(Axis(0), &[x1.view(), c])?, k + c.nrows()),
        _ => (x1, k),
    };
    let quality = gcfg.quality.map(|p| {
        let x0 = x - &(v * t);
        let mut q = dpp::quality_vector(x0.view(), &p).to_vec();
        q.resize(order, 1.0);
        Array1::from(q)
    });
    let Some(g_all) = dpp_gradient(set.view(), gcfg, quality.as_ref())? else {
        return Ok(None);
    };
    let g = g_all.slice(ndarray::s![..k, ..]).to_owned();
    Ok(Some((pull_through_estimate(pass, g, t, gcfg.jacobian)?, order)))
}

/// Unscaled DiverseFlow direction `∇_{x_t} log L(x̂₁(x_t))` at a batch.
///
/// Uses the configured objective, quality and Jacobian mode, with the median
/// bandwidth and quality held fixed. Zero when every estimate coincides.
pub fn diversity_gradient(batch: &ParticleBatch, field: &VelocityField, gcfg: &GuidanceConfig) -> Result<Array2<f64>> {
    let pass = field.forward_pass(batch.points.view(), batch.t)?;
    Ok(dpp_state_gradient(&pass, &batch.points, batch.t, gcfg, None)?
        .map(|(g, _)| g)
        .unwrap_or_else(|| Array2::zeros(batch.points.raw_dim())))
}

/// Signed guidance velocity `±γ(t)·∇` for a flow step, plus the kernel order used.
///
/// `frozen` rows join the DPP set as fixed repulsors; they receive no gradient.
fn flow_guidance(
    pass: &ForwardPass<'_>,
    x: &Array2<f64>,
    t: f64,
    gcfg: &GuidanceConfig,
    frozen: Option<ArrayView2<f64>>,
) -> Result<Option<(Array2<f64>, usize)>> {
    if gcfg.raw_scale(t) == 0.0 {
        return Ok(None);
    }
    let k = x.nrows();
    let (grad, order, sign) = match gcfg.method {
        Method::None => return Ok(None),
        Method::DiverseFlow => match dpp_state_gradient(pass, x, t, gcfg, frozen)? {
            Some((g, order)) => (g, order, 1.0),
            None => return Ok(None),
        },
        Method::ParticleGuidance => match gcfg.pg_kernel_on {
            KernelSupport::State => match pg_gradient(x.view(), gcfg)? {
                Some(g) => (g, k, -1.0),
                None => return Ok(None),
            },
            KernelSupport::Estimate => {
                let x1 = x + &(pass.output() * (1.0 - t));
                match pg_gradient(x1.view(), gcfg)? {
                    Some(g) => (pull_through_estimate(pass, g, t, gcfg.jacobian)?, k, -1.0),
                    None => return Ok(None),
                }
            }
        },
    };
    let gam = gamma(gcfg, t, frobenius(&grad));
    Ok(Some((grad * (sign * gam), order)))
}

fn guided_flow_step(
    field: &VelocityField,
    batch: &ParticleBatch,
    gcfg: &GuidanceConfig,
    dt: f64,
    frozen: Option<ArrayView2<f64>>,
) -> Result<(ParticleBatch, Option<usize>)> {
    let t = batch.t;
    if gcfg.raw_scale(t) == 0.0 {
        let v = field.forward_batch(batch.points.view(), t)?;
        return Ok((ParticleBatch::new(euler(&batch.points, &v, dt), t + dt), None));
    }
    if batch.k() < 2 {
        return Err(Error::invalid("diversity guidance needs at least two particles"));
    }
    let pass = field.forward_pass(batch.points.view(), t)?;
    let (points, order) = match flow_guidance(&pass, &batch.points, t, gcfg, frozen)? {
        Some((push, order)) => (euler(&batch.points, &(pass.output() + &push), dt), Some(order)),
        None => (euler(&batch.points, pass.output(), dt), None),
    };
    Ok((ParticleBatch::new(points, t + dt), order))
}

/// One Euler step of the coupled system with the DiverseFlow term.
pub fn diverse_step(batch: &ParticleBatch, field: &VelocityField, gcfg: &GuidanceConfig, dt: f64) -> Result<ParticleBatch> {
    let cfg = GuidanceConfig { method: if gcfg.method == Method::None { Method::None } else { Method::DiverseFlow }, ..gcfg.clone() };
    Ok(guided_flow_step(field, batch, &cfg, dt, None)?.0)
}

/// One Euler step with the Particle Guidance potential.
pub fn particle_guidance_step(batch: &ParticleBatch, field: &VelocityField, gcfg: &GuidanceConfig, dt: f64) -> Result<ParticleBatch> {
    let cfg = GuidanceConfig { method: if gcfg.method == Method::None { Method::None } else { Method::ParticleGuidance }, ..gcfg.clone() };
    Ok(guided_flow_step(field, batch, &cfg, dt, None)?.0)
}

fn grid_time(i: usize, n: usize) -> f64 {
    i as f64 / n as f64
}

/// Integrates from `t = 0` to `t = 1`, calling `visit` on every state.
fn integrate(
    field: &VelocityField,
    x0: &ParticleBatch,
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
    frozen: Option<ArrayView2<f64>>,
    kernel_orders: &mut Vec<usize>,
    mut visit: impl FnMut(&ParticleBatch),
) -> Result<ParticleBatch> {
    gcfg.validate()?;
    scfg.validate()?;
    if x0.t != 0.0 {
        return Err(Error::invalid(format!("flow sampling starts at t = 0, got {}", x0.t)));
    }
    if x0.k() == 0 || x0.dim() != field.input_dim() || !x0.is_finite() {
        return Err(Error::invalid("initial batch must be non-empty, finite and match the field dimension"));
    }
    let n = scfg.steps;
    let dt = 1.0 / n as f64;
    let mut batch = x0.clone();
    visit(&batch);
    for i in 0..n {
        batch.t = grid_time(i, n);
        let (mut next, order) = guided_flow_step(field, &batch, gcfg, dt, frozen).map_err(|e| match e {
            Error::NonFiniteLayer { .. } => Error::Integration { step: i },
            other => other,
        })?;
        if let Some(o) = order {
            kernel_orders.push(o);
        }
        next.t = grid_time(i + 1, n);
        if !next.is_finite() {
            return Err(Error::Integration { step: i });
        }
        batch = next;
        visit(&batch);
    }
    Ok(batch)
}

/// Euler trajectory of `steps + 1` batches from `t = 0` to `t = 1`.
pub fn sample_flow(field: &VelocityField, x0: &ParticleBatch, gcfg: &GuidanceConfig, scfg: &SolverConfig) -> Result<Vec<ParticleBatch>> {
    let mut traj = Vec::with_capacity(scfg.steps + 1);
    integrate(field, x0, gcfg, scfg, None, &mut Vec::new(), |b| traj.push(b.clone()))?;
    Ok(traj)
}

/// Terminal batch of [`sample_flow`] without storing the trajectory.
pub fn sample_flow_terminal(
    field: &VelocityField,
    x0: &ParticleBatch,
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
) -> Result<ParticleBatch> {
    integrate(field, x0, gcfg, scfg, None, &mut Vec::new(), |_| {})
}

/// Reverse-time sampling of a Gaussian mixture from its exact noised score.
///
/// Integrates `dx = (1+λ)/2·g²·∇log p_t(x)·dt + √λ·g·dW` on the VE path in
/// flow time, starting from `N(0, σ_max² I)`; `λ = 0` is the probability-flow
/// ODE and `λ = 1` the reverse SDE. The guidance velocity is added to the drift.
pub fn sample_ideal_score_with(
    gmm: &GmmSpec,
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
    k: usize,
    rng: &mut SimRng,
) -> Result<ParticleBatch> {
    gcfg.validate()?;
    scfg.validate()?;
    if k == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let ve = scfg.ve;
    let d = gmm.dim();
    let lam = scfg.noise_level;
    let n = scfg.steps;
    let dt = 1.0 / n as f64;
    let mut x = Array2::from_shape_simple_fn((k, d), || ve.sigma_max * rng.sample::<f64, _>(StandardNormal));

    for i in 0..n {
        let t = grid_time(i, n);
        let sigma = ve.sigma(t);
        let g2 = ve.g2(t);
        let mut score = Array2::zeros((k, d));
        for (r, mut row) in score.rows_mut().into_iter().enumerate() {
            row.assign(&gmm_noised_score(gmm, x.row(r), sigma));
        }
        let mut drift = score.clone() * (0.5 * (1.0 + lam) * g2);

        if gcfg.raw_scale(t) != 0.0 {
            if k < 2 {
                return Err(Error::invalid("diversity guidance needs at least two particles"));
            }
            let support = match (gcfg.method, gcfg.score_kernel_on, gcfg.pg_kernel_on) {
                (Method::DiverseFlow, KernelSupport::Estimate, _) | (Method::ParticleGuidance, _, KernelSupport::Estimate) => {
                    &x + &(&score * (sigma * sigma))
                }
                _ => x.clone(),
            };
            let on_estimate = match gcfg.method {
                Method::DiverseFlow => gcfg.score_kernel_on == KernelSupport::Estimate,
                _ => gcfg.pg_kernel_on == KernelSupport::Estimate,
            };
            let grad = match gcfg.method {
                Method::DiverseFlow => dpp_gradient(support.view(), gcfg, None)?,
                Method::ParticleGuidance => pg_gradient(support.view(), gcfg)?.map(|g| -g),
                Method::None => None,
            };
            // chain rule through x̂ = x + σ²∇log p, whose Jacobian I + σ²H is symmetric
            let grad = match grad {
                Some(g) if on_estimate && gcfg.jacobian == JacobianMode::Full => {
                    let mut full = g.clone();
                    for (r, mut row) in full.rows_mut().into_iter().enumerate() {
                        let hg = gmm_noised_hvp(gmm, x.row(r), sigma, g.row(r));
                        row.scaled_add(sigma * sigma, &hg);
                    }
                    Some(full)
                }
                other => other,
            };
            if let Some(grad) = grad {
                let gam = gamma(gcfg, t, frobenius(&grad));
                drift += &(grad * gam);
            }
        }

        x = euler(&x, &drift, dt);
        if lam > 0.0 {
            let amp = (lam * g2 * dt).sqrt();
            for v in x.iter_mut() {
                *v += amp * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: i });
        }
    }
    Ok(ParticleBatch::new(x, 1.0))
}

/// [`sample_ideal_score_with`] seeded from `scfg.seed`.
pub fn sample_ideal_score(gmm: &GmmSpec, gcfg: &GuidanceConfig, scfg: &SolverConfig, k: usize) -> Result<ParticleBatch> {
    sample_ideal_score_with(gmm, gcfg, scfg, k, &mut rng::seeded(scfg.seed))
}

/// Observed coordinates for inpainting: `mask[c]` marks `y[c]` as known.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintTask {
    pub y: Array1<f64>,
    pub mask: Vec<bool>,
}

impl InpaintTask {
    pub fn new(y: Array1<f64>, mask: Vec<bool>) -> Result<Self> {
        if y.len() != mask.len() || y.is_empty() {
            return Err(Error::invalid("observation and mask must have the same positive length"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observation must be finite"));
        }
        Ok(InpaintTask { y, mask })
    }

    /// Correction scale `α(t) = √(1 − t)`.
    pub fn alpha(t: f64) -> f64 {
        (1.0 - t).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InpaintStatus {
    Sampled,
    /// Every coordinate was observed; the output is `y` and nothing was sampled.
    FullyObserved,
}

#[derive(Debug, Clone)]
pub struct InpaintOutcome {
    pub batch: ParticleBatch,
    pub status: InpaintStatus,
}

/// Manifold-constrained-gradient inpainting on the Euler grid.
///
/// Per step: DiverseFlow-guided Euler update, then the correction
/// `−α(t_i)·∂/∂x ‖M⊙(y − x̂₁)‖²`, then the known coordinates are replaced by
/// the straight line `x₀(1 − t_{i+1}) + y·t_{i+1}`.
pub fn mcg_inpaint(
    field: &VelocityField,
    task: &InpaintTask,
    x0: &ParticleBatch,
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
) -> Result<InpaintOutcome> {
    gcfg.validate()?;
    scfg.validate()?;
    let d = task.y.len();
    if x0.dim() != d || field.input_dim() != d || x0.k() == 0 || !x0.is_finite() {
        return Err(Error::invalid("inpainting batch, observation and field must agree in dimension"));
    }
    if x0.t != 0.0 {
        return Err(Error::invalid("inpainting starts at t = 0"));
    }
    let k = x0.k();
    if task.mask.iter().all(|&m| m) {
        log::warn!("inpainting mask covers every coordinate; returning the observation");
        let points = Array2::from_shape_fn((k, d), |(_, c)| task.y[c]);
        return Ok(InpaintOutcome { batch: ParticleBatch::new(points, 1.0), status: InpaintStatus::FullyObserved });
    }
    let any_masked = task.mask.iter().any(|&m| m);
    let n = scfg.steps;
    let dt = 1.0 / n as f64;
    let start = x0.points.clone();
    let mut x = start.clone();

    for i in 0..n {
        let t = grid_time(i, n);
        let t_next = grid_time(i + 1, n);
        let pass = field.forward_pass(x.view(), t).map_err(|_| Error::Integration { step: i })?;
        if gcfg.raw_scale(t) != 0.0 && k < 2 {
            return Err(Error::invalid("diversity guidance needs at least two particles"));
        }
        let stepped = match flow_guidance(&pass, &x, t, gcfg, None)? {
            Some((push, _)) => euler(&x, &(pass.output() + &push), dt),
            None => euler(&x, pass.output(), dt),
        };
        if !any_masked {
            x = stepped;
        } else {
            let x1 = &x + &(pass.output() * (1.0 - t));
            let resid = Array2::from_shape_fn((k, d), |(r, c)| if task.mask[c] { task.y[c] - x1[[r, c]] } else { 0.0 });
            // ∂/∂x ‖M⊙(y − x̂₁)‖² = −2 (I + (1 − t)Jᵀ) M⊙(y − x̂₁)
            let mcg = pull_through_estimate(&pass, resid, t, JacobianMode::Full)? * -2.0;
            let corrected = stepped - &(mcg * InpaintTask::alpha(t));
            x = Array2::from_shape_fn((k, d), |(r, c)| {
                if task.mask[c] {
                    start[[r, c]] * (1.0 - t_next) + task.y[c] * t_next
                } else {
                    corrected[[r, c]]
                }
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: i });
        }
    }
    Ok(InpaintOutcome { batch: ParticleBatch::new(x, 1.0), status: InpaintStatus::Sampled })
}

#[derive(Debug, Clone)]
pub struct ProgressiveOutcome {
    /// Terminal batch of each round, in order.
    pub rounds: Vec<ParticleBatch>,
    /// DPP kernel order at every guided step of each round.
    pub kernel_orders: Vec<Vec<usize>>,
}

impl ProgressiveOutcome {
    pub fn samples(&self) -> Array2<f64> {
        let views: Vec<_> = self.rounds.iter().map(|b| b.points.view()).collect();
        concatenate(Axis(0), &views).expect("rounds share a dimension")
    }
}

/// Progressively growing kernel: round `r` repels its live estimates from
/// every sample finished in earlier rounds. One round per entry of `sources`.
pub fn progressive_sample(
    field: &VelocityField,
    sources: &[ParticleBatch],
    gcfg: &GuidanceConfig,
    scfg: &SolverConfig,
) -> Result<ProgressiveOutcome> {
    if sources.is_empty() {
        return Err(Error::invalid("need at least one round"));
    }
    let cfg = GuidanceConfig { method: if gcfg.method == Method::None { Method::None } else { Method::DiverseFlow }, ..gcfg.clone() };
    let mut cache: Option<Array2<f64>> = None;
    let mut rounds = Vec::with_capacity(sources.len());
    let mut kernel_orders = Vec::with_capacity(sources.len());
    for x0 in sources {
        let mut orders = Vec::new();
        let out = integrate(field, x0, &cfg, scfg, cache.as_ref().map(|c| c.view()), &mut orders, |_| {})?;
        cache = Some(match cache {
            None => out.points.clone(),
            Some(c) => concatenate(Axis(0), &[c.view(), out.points.view()])?,
        });
        rounds.push(out);
        kernel_orders.push(orders);
    }
    Ok(ProgressiveOutcome { rounds, kernel_orders })
}
