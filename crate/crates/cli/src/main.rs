//! `dppflow`: train toy flow-matching models, sample diverse batches and run
//! the mode-discovery benchmarks. Every run writes CSVs, SVG views and the
//! fully resolved config into its output directory.

mod commands;
mod config;
mod failure;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dppflow::train::Formulation;

use config::{MethodName, RunConfig, SEED_ENV};
use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "dppflow", version, about = "Diverse sampling from flow-matching models with DPP guidance")]
struct Cli {
    /// Cap on worker threads for parallel trials (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one velocity field per formulation.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated formulations (cfm, mb-ot, sb-cfm, si-cfm).
        #[arg(long, value_delimiter = ',')]
        formulation: Vec<Formulation>,
        #[arg(long)]
        train_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Sample one batch from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Trial index selecting the source draw.
        #[arg(long)]
        trial: Option<u64>,
        /// Also write every Euler state.
        #[arg(long)]
        dump_trajectory: bool,
    },
    /// Mode discovery of trained checkpoints versus budget K.
    BenchModes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[command(flatten)]
        bench: BenchFlags,
        #[arg(long, value_delimiter = ',')]
        checkpoint: Vec<PathBuf>,
    },
    /// Mode discovery with the closed-form score of a mixture (circle GMM by default).
    BenchIdeal {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[command(flatten)]
        bench: BenchFlags,
    },
    /// True-score mode discovery over a noise-level × strength grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[arg(long, value_delimiter = ',')]
        noise_levels: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        strengths: Vec<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Inpainting with and without diversity guidance, paired over trials.
    InpaintDemo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Observed values, comma-separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Vec<f64>,
        /// Observed coordinates as 0/1, comma-separated.
        #[arg(long, value_delimiter = ',')]
        mask: Vec<u8>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (also read from DPPFLOW_SEED).
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Euler steps of the sampler.
    #[arg(long)]
    steps: Option<usize>,
    /// Noise level λ of the true-score sampler.
    #[arg(long)]
    noise_level: Option<f64>,
}

#[derive(Args, Debug)]
struct GuidanceFlags {
    #[arg(long, value_enum)]
    method: Option<MethodName>,
    /// Strength W.
    #[arg(long)]
    strength: Option<f64>,
    /// Kernel spread h.
    #[arg(long)]
    h: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchFlags {
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Vec<MethodName>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    radius_mult: Option<f64>,
}

fn base_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.solver.steps = s;
    }
    if let Some(l) = common.noise_level {
        cfg.solver.noise_level = l;
    }
    Ok(cfg)
}

fn apply_guidance(cfg: &mut RunConfig, g: &GuidanceFlags) {
    if let Some(m) = g.method {
        cfg.guidance.method = m;
    }
    if let Some(w) = g.strength {
        cfg.guidance.strength = w;
    }
    if let Some(h) = g.h {
        cfg.guidance.h = h;
    }
}

fn apply_bench(cfg: &mut RunConfig, b: &BenchFlags) {
    if !b.methods.is_empty() {
        cfg.bench.methods = b.methods.clone();
    }
    let s = &mut cfg.bench;
    s.k_min = b.k_min.unwrap_or(s.k_min);
    s.k_max = b.k_max.unwrap_or(s.k_max);
    s.trials = b.trials.unwrap_or(s.trials);
    s.radius_mult = b.radius_mult.unwrap_or(s.radius_mult);
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Config(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Train { common, formulation, train_steps, batch_size, learning_rate, hidden, layers } => {
            let mut cfg = base_config(&common)?;
            if !formulation.is_empty() {
                let path = cfg.path.get_or_insert_with(|| config::PathSection {
                    formulation: config::Formulations::Many(Vec::new()),
                    sigma_fm: 0.0,
                    sb_sigma: 0.1,
                });
                path.formulation = if formulation.len() == 1 {
                    config::Formulations::One(formulation[0])
                } else {
                    config::Formulations::Many(formulation)
                };
            }
            let t = &mut cfg.train;
            t.steps = train_steps.unwrap_or(t.steps);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            t.hidden = hidden.unwrap_or(t.hidden);
            t.layers = layers.unwrap_or(t.layers);
            commands::train(&cfg)
        }
        Command::Sample { common, guidance, checkpoint, k, trial, dump_trajectory } => {
            let mut cfg = base_config(&common)?;
            apply_guidance(&mut cfg, &guidance);
            if checkpoint.is_some() {
                cfg.sample.checkpoint = checkpoint;
            }
            cfg.sample.k = k.unwrap_or(cfg.sample.k);
            cfg.sample.trial = trial.unwrap_or(cfg.sample.trial);
            cfg.sample.dump_trajectory |= dump_trajectory;
            commands::sample(&cfg)
        }
        Command::BenchModes { common, guidance, bench, checkpoint } => {
            let mut cfg = base_config(&common)?;
            apply_guidance(&mut cfg, &guidance);
            apply_bench(&mut cfg, &bench);
            if !checkpoint.is_empty() {
                cfg.bench.checkpoints = checkpoint;
            }
            commands::bench_modes(&cfg)
        }
        Command::BenchIdeal { common, guidance, bench } => {
            let mut cfg = base_config(&common)?;
            apply_guidance(&mut cfg, &guidance);
            apply_bench(&mut cfg, &bench);
            commands::bench_ideal(&cfg)
        }
        Command::Sweep { common, guidance, noise_levels, strengths, k, trials } => {
            let mut cfg = base_config(&common)?;
            apply_guidance(&mut cfg, &guidance);
            if !noise_levels.is_empty() {
                cfg.sweep.noise_levels = noise_levels;
            }
            if !strengths.is_empty() {
                cfg.sweep.strengths = strengths;
            }
            cfg.sweep.k = k.unwrap_or(cfg.sweep.k);
            cfg.sweep.trials = trials.unwrap_or(cfg.sweep.trials);
            commands::sweep(&cfg)
        }
        Command::InpaintDemo { common, guidance, checkpoint, y, mask, k, trials } => {
            let mut cfg = base_config(&common)?;
            apply_guidance(&mut cfg, &guidance);
            if checkpoint.is_some() {
                cfg.inpaint.checkpoint = checkpoint;
            }
            if !y.is_empty() {
                cfg.inpaint.y = y;
            }
            if !mask.is_empty() {
                if mask.iter().any(|&m| m > 1) {
                    return Err(Failure::Config("--mask entries must be 0 or 1".into()));
                }
                cfg.inpaint.mask = mask.iter().map(|&m| m == 1).collect();
            }
            cfg.inpaint.k = k.unwrap_or(cfg.inpaint.k);
            cfg.inpaint.trials = trials.unwrap_or(cfg.inpaint.trials);
            commands::inpaint_demo(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dppflow: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
