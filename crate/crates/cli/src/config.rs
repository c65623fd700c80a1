//! The run configuration: one TOML document, strictly parsed.
//!
//! Every section is optional except `[path]` for `train`. Unknown keys are
//! rejected everywhere so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dppflow::bench::{circle_target, make_random_gmm, make_source_8gauss, toy_target, GmmSpec, Layout, WeightMode};
use dppflow::dpp::{Objective, QualityParams};
use dppflow::guidance::{GuidanceConfig, JacobianMode, KernelSupport, Method, Schedule, SolverConfig, VeSchedule};
use dppflow::train::{FlowPathSpec, Formulation, TrainConfig};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const SEED_ENV: &str = "DPPFLOW_SEED";
pub const RESOLVED_NAME: &str = "resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Master seed: network init, data order and per-trial streams.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_source")]
    pub source: GmmRef,
    #[serde(default = "default_target")]
    pub target: GmmRef,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub inpaint: InpaintSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("dppflow-out")
}

fn default_source() -> GmmRef {
    GmmRef::EightGaussians {}
}

fn default_target() -> GmmRef {
    GmmRef::Toy {}
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty document is a valid config")
    }
}

/// One formulation, or several trained from the same template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Formulations {
    One(Formulation),
    Many(Vec<Formulation>),
}

impl Formulations {
    pub fn to_vec(&self) -> Vec<Formulation> {
        match self {
            Formulations::One(f) => vec![*f],
            Formulations::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub formulation: Formulations,
    #[serde(default)]
    pub sigma_fm: f64,
    #[serde(default = "default_sb_sigma")]
    pub sb_sigma: f64,
}

fn default_sb_sigma() -> f64 {
    0.1
}

impl PathSection {
    pub fn spec(&self, formulation: Formulation) -> FlowPathSpec {
        FlowPathSpec { formulation, sigma_fm: self.sigma_fm, sb_sigma: self.sb_sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { batch_size: 256, steps: 20_000, learning_rate: 1e-3, hidden: 256, layers: 4 }
    }
}

/// A named or explicit Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GmmRef {
    /// Eight modes on a radius-4 circle, σ = 0.1.
    // empty braces so that stray keys next to `kind` are rejected
    EightGaussians {},
    /// The pinned ten-mode random target.
    Toy {},
    /// Ten uniform modes on a radius-5 circle.
    Circle {},
    Random {
        seed: u64,
        modes: usize,
        dim: usize,
        weights: WeightMode,
        layout: Layout,
    },
    Explicit {
        means: Vec<Vec<f64>>,
        scales: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl GmmRef {
    pub fn resolve(&self) -> Result<GmmSpec, Failure> {
        Ok(match self {
            GmmRef::EightGaussians {} => make_source_8gauss(0),
            GmmRef::Toy {} => toy_target(),
            GmmRef::Circle {} => circle_target(),
            GmmRef::Random { seed, modes, dim, weights, layout } => make_random_gmm(*seed, *modes, *dim, *weights, *layout)?,
            GmmRef::Explicit { means, scales, weights } => {
                let d = means.first().map_or(0, Vec::len);
                if d == 0 || means.iter().any(|m| m.len() != d) {
                    return Err(Failure::Config("explicit mixture means must be non-empty rows of equal length".into()));
                }
                let flat: Vec<f64> = means.iter().flatten().copied().collect();
                let means = Array2::from_shape_vec((means.len(), d), flat).expect("rectangular by construction");
                GmmSpec::new(means, scales.clone(), weights.clone())?
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    None,
    Diverseflow,
    #[value(name = "particle_guidance", alias = "particle-guidance", alias = "pg")]
    ParticleGuidance,
}

impl MethodName {
    pub fn method(self) -> Method {
        match self {
            MethodName::None => Method::None,
            MethodName::Diverseflow => Method::DiverseFlow,
            MethodName::ParticleGuidance => Method::ParticleGuidance,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::None => "none",
            MethodName::Diverseflow => "diverseflow",
            MethodName::ParticleGuidance => "particle_guidance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    SqrtOneMinusT,
    SigmaPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportName {
    #[serde(rename = "x_t")]
    State,
    #[serde(rename = "x1_hat")]
    Estimate,
}

impl SupportName {
    fn support(self) -> KernelSupport {
        match self {
            SupportName::State => KernelSupport::State,
            SupportName::Estimate => KernelSupport::Estimate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianName {
    Full,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub method: MethodName,
    pub strength: f64,
    pub schedule: ScheduleName,
    pub normalize_by_grad_norm: bool,
    pub h: f64,
    pub objective: Objective,
    pub pg_kernel_on: SupportName,
    /// Kernel support for DiverseFlow under the true score (`x1_hat` = denoised mean).
    pub score_kernel_on: SupportName,
    pub jacobian: JacobianName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityParams>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            method: MethodName::Diverseflow,
            strength: 2.0,
            schedule: ScheduleName::SqrtOneMinusT,
            normalize_by_grad_norm: true,
            h: 1.0,
            objective: Objective::Exact,
            pg_kernel_on: SupportName::State,
            score_kernel_on: SupportName::State,
            jacobian: JacobianName::Full,
            quality: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub steps: usize,
    pub noise_level: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let ve = VeSchedule::default();
        SolverSection { steps: 100, noise_level: 0.0, sigma_max: ve.sigma_max, sigma_min: ve.sigma_min }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub k: usize,
    pub trial: u64,
    pub dump_trajectory: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { checkpoint: None, k: 5, trial: 0, dump_trajectory: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub checkpoints: Vec<PathBuf>,
    pub methods: Vec<MethodName>,
    pub k_min: usize,
    pub k_max: usize,
    pub trials: usize,
    pub radius_mult: f64,
    /// Mixture whose closed-form score drives `bench-ideal`.
    pub ideal_target: GmmRef,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            checkpoints: Vec::new(),
            methods: vec![MethodName::None, MethodName::Diverseflow],
            k_min: 2,
            k_max: 10,
            trials: 1000,
            radius_mult: dppflow::bench::DEFAULT_RADIUS_MULT,
            ideal_target: GmmRef::Circle {},
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub gmm: GmmRef,
    pub noise_levels: Vec<f64>,
    pub strengths: Vec<f64>,
    pub k: usize,
    pub trials: usize,
    pub radius_mult: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            gmm: GmmRef::Circle {},
            noise_levels: vec![0.0, 0.1, 0.3, 1.0],
            strengths: vec![0.0, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0],
            k: 10,
            trials: 100,
            radius_mult: dppflow::bench::DEFAULT_RADIUS_MULT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
    pub k: usize,
    pub trials: usize,
    pub radius_mult: f64,
}

impl Default for InpaintSection {
    fn default() -> Self {
        InpaintSection {
            checkpoint: None,
            y: vec![0.0, 0.0],
            mask: vec![true, false],
            k: 4,
            trials: 200,
            radius_mult: dppflow::bench::DEFAULT_RADIUS_MULT,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config into the output directory, creating it.
    pub fn write_resolved(&self) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Failure::io(&self.output_dir, e))?;
        let path = self.output_dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    pub fn guidance(&self) -> Result<GuidanceConfig, Failure> {
        let g = &self.guidance;
        let quality = g.quality.map(|q| QualityParams::new(q.rho, q.epsilon)).transpose()?;
        let out = GuidanceConfig {
            method: g.method.method(),
            strength: g.strength,
            schedule: match g.schedule {
                ScheduleName::SqrtOneMinusT => Schedule::SqrtOneMinusT,
                ScheduleName::SigmaPath => Schedule::SigmaPath(self.ve()),
            },
            normalize_by_grad_norm: g.normalize_by_grad_norm,
            h: g.h,
            quality,
            objective: g.objective,
            pg_kernel_on: g.pg_kernel_on.support(),
            score_kernel_on: g.score_kernel_on.support(),
            jacobian: match g.jacobian {
                JacobianName::Full => JacobianMode::Full,
                JacobianName::Identity => JacobianMode::Identity,
            },
            ..GuidanceConfig::default()
        };
        out.validate()?;
        Ok(out)
    }

    fn ve(&self) -> VeSchedule {
        VeSchedule { sigma_max: self.solver.sigma_max, sigma_min: self.solver.sigma_min }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig { steps: self.solver.steps, noise_level: self.solver.noise_level, seed: self.seed, ve: self.ve() }
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let t = &self.train;
        Ok(TrainConfig {
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            seed: self.seed,
            hidden: t.hidden,
            layers: t.layers,
            source: self.source.resolve()?,
            target: self.target.resolve()?,
        })
    }

    pub fn path_section(&self) -> Result<&PathSection, Failure> {
        self.path.as_ref().ok_or_else(|| Failure::Config("missing [path] section: key `formulation` is required".into()))
    }
}
