//! Simulation-free flow-matching training.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{gmm_sample, GmmSpec};
use crate::error::{Error, Result};
use crate::linalg::{hungarian, pairwise_sq_dists_between, sinkhorn, DEFAULT_SINKHORN_ITERS};
use crate::net::{Checkpoint, ParamGrads, VelocityField};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formulation {
    #[serde(rename = "cfm")]
    Cfm,
    #[serde(rename = "mb-ot")]
    MbOt,
    #[serde(rename = "sb-cfm")]
    SbCfm,
    #[serde(rename = "si-cfm")]
    SiCfm,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [Formulation::Cfm, Formulation::MbOt, Formulation::SbCfm, Formulation::SiCfm];

    pub fn as_str(self) -> &'static str {
        match self {
            Formulation::Cfm => "cfm",
            Formulation::MbOt => "mb-ot",
            Formulation::SbCfm => "sb-cfm",
            Formulation::SiCfm => "si-cfm",
        }
    }

    fn is_coupled(self) -> bool {
        matches!(self, Formulation::MbOt | Formulation::SbCfm)
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown formulation {s:?} (expected cfm, mb-ot, sb-cfm or si-cfm)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowPathSpec {
    pub formulation: Formulation,
    #[serde(default)]
    pub sigma_fm: f64,
    #[serde(default = "default_sb_sigma")]
    pub sb_sigma: f64,
}

fn default_sb_sigma() -> f64 {
    0.1
}

impl FlowPathSpec {
    pub fn new(formulation: Formulation) -> Self {
        FlowPathSpec { formulation, sigma_fm: 0.0, sb_sigma: default_sb_sigma() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_fm >= 0.0 && self.sigma_fm.is_finite()) {
            return Err(Error::invalid("sigma_fm must be nonnegative"));
        }
        if self.formulation == Formulation::SbCfm && !(self.sb_sigma > 0.0 && self.sb_sigma.is_finite()) {
            return Err(Error::invalid("SB-CFM needs sb_sigma > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Number of affine layers.
    pub layers: usize,
    pub source: GmmSpec,
    pub target: GmmSpec,
}

impl TrainConfig {
    /// Batch 256, 20k steps, lr 1e-3, a 4-layer 256-wide field.
    pub fn with_defaults(source: GmmSpec, target: GmmSpec) -> Self {
        TrainConfig { batch_size: 256, steps: 20_000, learning_rate: 1e-3, seed: 0, hidden: 256, layers: 4, source, target }
    }

    fn validate(&self, spec: &FlowPathSpec) -> Result<()> {
        spec.validate()?;
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 || (spec.formulation.is_coupled() && self.batch_size < 2) {
            return Err(Error::invalid("batch_size must be >= 1, and >= 2 for coupled formulations"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.source.dim() != self.target.dim() {
            return Err(Error::invalid("source and target dimensions differ"));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON of `(spec, config)`.
pub fn config_digest(spec: &FlowPathSpec, config: &TrainConfig) -> String {
    let json = serde_json::to_string(&(spec, config)).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x_t: Array1<f64>,
    pub u_target: Array1<f64>,
    pub t: f64,
}

/// Re-pair `x1` against `x0` according to the formulation's coupling.
pub fn couple_batch(spec: &FlowPathSpec, x0: ArrayView2<f64>, x1: ArrayView2<f64>, rng: &mut SimRng) -> Result<(Array2<f64>, Array2<f64>)> {
    if x0.dim() != x1.dim() {
        return Err(Error::invalid("coupled batches must have equal shapes"));
    }
    match spec.formulation {
        Formulation::Cfm | Formulation::SiCfm => Ok((x0.to_owned(), x1.to_owned())),
        Formulation::MbOt => {
            let cost = pairwise_sq_dists_between(x0, x1)?;
            let a = hungarian(cost.view())?;
            Ok((x0.to_owned(), x1.select(Axis(0), &a.perm)))
        }
        Formulation::SbCfm => {
            let cost = pairwise_sq_dists_between(x0, x1)?;
            let reg = 2.0 * spec.sb_sigma * spec.sb_sigma;
            let plan = sinkhorn(cost.view(), reg, DEFAULT_SINKHORN_ITERS)?.plan;
            let n = x0.nrows();
            let total: f64 = plan.sum();
            let mut rows = Vec::with_capacity(n);
            let mut cols = Vec::with_capacity(n);
            for _ in 0..n {
                let mut u = rng.random::<f64>() * total;
                let mut pick = plan.len() - 1;
                for (idx, &p) in plan.iter().enumerate() {
                    if u < p {
                        pick = idx;
                        break;
                    }
                    u -= p;
                }
                rows.push(pick / plan.ncols());
                cols.push(pick % plan.ncols());
            }
            Ok((x0.select(Axis(0), &rows), x1.select(Axis(0), &cols)))
        }
    }
}

/// `(cos, sin)` of `πt/2`, exact at both endpoints.
fn quarter_turn(t: f64) -> (f64, f64) {
    if t <= 0.5 {
        ((FRAC_PI_2 * t).cos(), (FRAC_PI_2 * t).sin())
    } else {
        let r = FRAC_PI_2 * (1.0 - t);
        (r.sin(), r.cos())
    }
}

/// Point on the conditional path between `x0` and `x1` and its target velocity.
pub fn sample_path(spec: &FlowPathSpec, x0: ArrayView1<f64>, x1: ArrayView1<f64>, t: f64, rng: &mut SimRng) -> Result<PathSample> {
    if x0.len() != x1.len() {
        return Err(Error::invalid("path endpoints differ in dimension"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("path time {t} outside [0, 1]")));
    }
    let d = x0.len();
    let (x_t, u) = match spec.formulation {
        Formulation::Cfm | Formulation::MbOt => {
            let mut x_t = &x0 * (1.0 - t) + &x1 * t;
            if spec.sigma_fm > 0.0 {
                for v in x_t.iter_mut() {
                    *v += spec.sigma_fm * rng.sample::<f64, _>(StandardNormal);
                }
            }
            (x_t, &x1 - &x0)
        }
        Formulation::SbCfm => {
            if t <= 0.0 || t >= 1.0 {
                return Err(Error::DegenerateTime(t));
            }
            let s = (t * (1.0 - t)).sqrt();
            let eps: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let x_t = &x0 * (1.0 - t) + &x1 * t + &eps * (spec.sb_sigma * s);
            let u = &x1 - &x0 + &eps * (spec.sb_sigma * (1.0 - 2.0 * t) / (2.0 * s));
            (x_t, u)
        }
        Formulation::SiCfm => {
            let (c, s) = quarter_turn(t);
            let x_t = &x0 * c + &x1 * s;
            let u = (&x1 * c - &x0 * s) * FRAC_PI_2;
            (x_t, u)
        }
    };
    Ok(PathSample { x_t, u_target: u, t })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn update(&mut self, field: &mut VelocityField, grads: &ParamGrads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in field.params_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Mean loss over the first 100 steps.
    pub initial_loss: f64,
    /// Mean loss over the last 100 steps.
    pub final_loss: f64,
}

const SMOOTHING_WINDOW: usize = 100;
const SB_TIME_RANGE: (f64, f64) = (0.01, 0.99);

/// Train a fresh field by regressing conditional target velocities.
///
/// Deterministic in `config.seed`. `on_step` sees every log row as it is produced.
pub fn train_with(spec: &FlowPathSpec, config: &TrainConfig, mut on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    config.validate(spec)?;
    let d = config.source.dim();
    let mut field = VelocityField::init(rng::derive_seed(config.seed, 0), d, config.hidden, config.layers)?;
    let mut data_rng = rng::stream(config.seed, 1);
    let mut adam = Adam::new(field.num_params(), config.learning_rate);
    let b = config.batch_size;
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let x0 = gmm_sample(&config.source, &mut data_rng, b);
        let x1 = gmm_sample(&config.target, &mut data_rng, b);
        let (x0, x1) = couple_batch(spec, x0.view(), x1.view(), &mut data_rng)?;
        let mut xt = Array2::zeros((b, d));
        let mut ut = Array2::zeros((b, d));
        let mut times = Array1::zeros(b);
        for r in 0..b {
            let t = if spec.formulation == Formulation::SbCfm {
                data_rng.random_range(SB_TIME_RANGE.0..SB_TIME_RANGE.1)
            } else {
                data_rng.random::<f64>()
            };
            let ps = sample_path(spec, x0.row(r), x1.row(r), t, &mut data_rng)?;
            xt.row_mut(r).assign(&ps.x_t);
            ut.row_mut(r).assign(&ps.u_target);
            times[r] = t;
        }

        let v = field.forward_batch_times(xt.view(), times.view()).map_err(|_| Error::TrainingDiverged { step, loss: f64::NAN })?;
        let resid = &v - &ut;
        let n = (b * d) as f64;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        let cot = resid * (2.0 / n);
        let (_, grads) = field.vjp_params_batch(xt.view(), times.view(), cot.view())?;
        adam.update(&mut field, &grads);

        let row = LogRow { step, loss, wallclock_ms: start.elapsed().as_millis() as u64 };
        on_step(&row);
        log.push(row);
    }

    let w = SMOOTHING_WINDOW.min(log.len());
    let initial_loss = log[..w].iter().map(|r| r.loss).sum::<f64>() / w as f64;
    let final_loss = log[log.len() - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64;
    let checkpoint = Checkpoint { field, formulation: spec.formulation, train_config_digest: config_digest(spec, config) };
    Ok(TrainOutcome { checkpoint, log, initial_loss, final_loss })
}

pub fn train(spec: &FlowPathSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, config, |_| {})
}
