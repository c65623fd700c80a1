//! Subcommand bodies. Each writes `resolved.toml` first, then its CSVs, then
//! SVG views derived from the same numbers.

use std::fs;
use std::path::{Path, PathBuf};

use dppflow::bench::{count_modes, gmm_sample, run_mode_trials, sweep_heatmap, GmmSpec, Model, DEFAULT_RADIUS_MULT};
use dppflow::guidance::{
    mcg_inpaint, sample_flow, GuidanceConfig, InpaintStatus, InpaintTask, Method, ParticleBatch, Schedule, SolverConfig,
};
use dppflow::net::Checkpoint;
use dppflow::rng;
use dppflow::train::train_with;
use ndarray::{Array1, ArrayView2};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::svg;

/// Points drawn from the target for scatter backgrounds.
const REFERENCE_POINTS: usize = 500;
const REFERENCE_STREAM: u64 = u64::MAX;

pub fn checkpoint_name(formulation: &str) -> String {
    format!("model-{formulation}.json")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Failure> {
    csv::Writer::from_path(path).map_err(|e| Failure::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn dim_header(prefix: &[&str], d: usize) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain((0..d).map(|c| format!("dim{c}"))).collect()
}

fn num<T: ToString>(v: T) -> String {
    v.to_string()
}

fn xy(points: ArrayView2<f64>) -> Vec<(f64, f64)> {
    points.rows().into_iter().map(|r| (r[0], if r.len() > 1 { r[1] } else { 0.0 })).collect()
}

fn reference(spec: &GmmSpec, seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng::stream(seed, REFERENCE_STREAM);
    xy(gmm_sample(spec, &mut r, REFERENCE_POINTS).view())
}

fn load_checkpoint(path: Option<&PathBuf>, what: &str) -> Result<Checkpoint, Failure> {
    let path = path.ok_or_else(|| Failure::Config(format!("{what}: no checkpoint given (flag --checkpoint or config key)")))?;
    Ok(Checkpoint::load(path)?)
}

fn trial_seeds(trials: usize) -> Result<Vec<u64>, Failure> {
    if trials == 0 {
        return Err(Failure::Config("trials must be at least 1".into()));
    }
    Ok((0..trials as u64).collect())
}

/// The true-score commands always scale guidance by the noise level σ(t).
fn true_score_guidance(cfg: &RunConfig) -> Result<GuidanceConfig, Failure> {
    let mut g = cfg.guidance()?;
    g.schedule = Schedule::SigmaPath(cfg.solver().ve);
    Ok(g)
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let path = cfg.path_section()?;
    let formulations = path.formulation.to_vec();
    if formulations.is_empty() {
        return Err(Failure::Config("[path] formulation list is empty".into()));
    }
    let tcfg = cfg.train_config()?;
    cfg.write_resolved()?;
    let dir = &cfg.output_dir;
    let mut curves = Vec::new();
    for f in formulations {
        let spec = path.spec(f);
        let log_path = dir.join(format!("train-log-{f}.csv"));
        let mut w = csv_writer(&log_path)?;
        w.write_record(["step", "loss", "wallclock_ms"]).map_err(|e| Failure::io(&log_path, e))?;
        let mut write_err = None;
        let outcome = train_with(&spec, &tcfg, |row| {
            if write_err.is_none() {
                if let Err(e) = w.write_record([num(row.step), num(row.loss), num(row.wallclock_ms)]) {
                    write_err = Some(e);
                }
            }
        })?;
        if let Some(e) = write_err {
            return Err(Failure::io(&log_path, e));
        }
        w.flush().map_err(|e| Failure::io(&log_path, e))?;
        let ckpt = dir.join(checkpoint_name(f.as_str()));
        outcome.checkpoint.save(&ckpt)?;
        eprintln!("{f}: loss {:.4} -> {:.4}, wrote {}", outcome.initial_loss, outcome.final_loss, ckpt.display());
        curves.push((f.to_string(), outcome.log.iter().map(|r| (r.step as f64, r.loss)).collect()));
    }
    write_text(&dir.join("train-loss.svg"), &svg::lines("training loss", "step", "loss", &curves))
}

pub fn sample(cfg: &RunConfig) -> Result<(), Failure> {
    let gcfg = cfg.guidance()?;
    let scfg = cfg.solver();
    let source = cfg.source.resolve()?;
    let target = cfg.target.resolve()?;
    let ckpt = load_checkpoint(cfg.sample.checkpoint.as_ref(), "sample")?;
    let s = &cfg.sample;
    if s.k == 0 {
        return Err(Failure::Config("k must be at least 1".into()));
    }
    cfg.write_resolved()?;
    let dir = &cfg.output_dir;

    let mut r = rng::stream(cfg.seed, s.trial);
    let x0 = ParticleBatch::new(gmm_sample(&source, &mut r, s.k), 0.0);
    let traj = sample_flow(&ckpt.field, &x0, &gcfg, &scfg)?;
    let last = traj.last().expect("trajectory includes the start");
    let d = last.dim();

    let path = dir.join("samples.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(dim_header(&["particle"], d)).map_err(|e| Failure::io(&path, e))?;
    for (p, row) in last.points.rows().into_iter().enumerate() {
        w.write_record(std::iter::once(num(p)).chain(row.iter().map(num))).map_err(|e| Failure::io(&path, e))?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;

    if s.dump_trajectory {
        let path = dir.join("trajectory.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(dim_header(&["trial", "step", "t", "particle"], d)).map_err(|e| Failure::io(&path, e))?;
        for (step, b) in traj.iter().enumerate() {
            for (p, row) in b.points.rows().into_iter().enumerate() {
                let head = [num(s.trial), num(step), num(b.t), num(p)];
                w.write_record(head.into_iter().chain(row.iter().map(num))).map_err(|e| Failure::io(&path, e))?;
            }
        }
        w.flush().map_err(|e| Failure::io(&path, e))?;
    }

    let series = vec![
        ("target".to_string(), reference(&target, cfg.seed)),
        ("source".to_string(), reference(&source, cfg.seed)),
        ("samples".to_string(), xy(last.points.view())),
    ];
    let title = format!("{} K={} ({})", cfg.guidance.method.as_str(), s.k, ckpt.formulation);
    write_text(&dir.join("scatter.svg"), &svg::scatter(&title, &series))
}

struct BenchRow {
    method: String,
    formulation: String,
    result: dppflow::bench::BenchResult,
}

fn write_bench(dir: &Path, rows: &[BenchRow], title: &str) -> Result<(), Failure> {
    let path = dir.join("bench-modes.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["method", "formulation", "K", "trials", "modes_mean", "modes_std", "modes_max"]).map_err(|e| Failure::io(&path, e))?;
    for r in rows {
        let b = &r.result;
        w.write_record([
            r.method.clone(),
            r.formulation.clone(),
            num(b.k),
            num(b.trials),
            num(b.modes_mean),
            num(b.modes_std),
            num(b.modes_max),
        ])
        .map_err(|e| Failure::io(&path, e))?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;

    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let name = format!("{} / {}", r.formulation, r.method);
        let point = (r.result.k as f64, r.result.modes_mean);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push(point),
            None => series.push((name, vec![point])),
        }
    }
    write_text(&dir.join("bench-modes.svg"), &svg::lines(title, "K", "modes found", &series))
}

fn bench_ks(cfg: &RunConfig) -> Result<std::ops::RangeInclusive<usize>, Failure> {
    let b = &cfg.bench;
    if b.k_min == 0 || b.k_min > b.k_max {
        return Err(Failure::Config(format!("empty or invalid K range {}..={}", b.k_min, b.k_max)));
    }
    if b.methods.is_empty() {
        return Err(Failure::Config("bench needs at least one method".into()));
    }
    Ok(b.k_min..=b.k_max)
}

pub fn bench_modes(cfg: &RunConfig) -> Result<(), Failure> {
    let base = cfg.guidance()?;
    let scfg = cfg.solver();
    let ks = bench_ks(cfg)?;
    let seeds = trial_seeds(cfg.bench.trials)?;
    if cfg.bench.checkpoints.is_empty() {
        return Err(Failure::Config("bench-modes: no checkpoints given (flag --checkpoint or bench.checkpoints)".into()));
    }
    let source = cfg.source.resolve()?;
    let target = cfg.target.resolve()?;
    let ckpts = cfg.bench.checkpoints.iter().map(|p| Ok(Checkpoint::load(p)?)).collect::<Result<Vec<_>, Failure>>()?;
    cfg.write_resolved()?;

    let mut rows = Vec::new();
    for ckpt in &ckpts {
        let model = Model::Flow { field: &ckpt.field, source: &source };
        for &m in &cfg.bench.methods {
            let g = GuidanceConfig { method: m.method(), ..base.clone() };
            for k in ks.clone() {
                let result = run_mode_trials(model, &target, &g, &scfg, k, &seeds, cfg.bench.radius_mult)?;
                eprintln!("{} {} K={k}: {:.3}", ckpt.formulation, m.as_str(), result.modes_mean);
                rows.push(BenchRow { method: m.as_str().into(), formulation: ckpt.formulation.to_string(), result });
            }
        }
    }
    write_bench(&cfg.output_dir, &rows, "modes discovered")
}

pub fn bench_ideal(cfg: &RunConfig) -> Result<(), Failure> {
    let base = true_score_guidance(cfg)?;
    let scfg = cfg.solver();
    let ks = bench_ks(cfg)?;
    let seeds = trial_seeds(cfg.bench.trials)?;
    let gmm = cfg.bench.ideal_target.resolve()?;
    cfg.write_resolved()?;

    let mut rows = Vec::new();
    for &m in &cfg.bench.methods {
        let g = GuidanceConfig { method: m.method(), ..base.clone() };
        for k in ks.clone() {
            let result = run_mode_trials(Model::TrueScore, &gmm, &g, &scfg, k, &seeds, cfg.bench.radius_mult)?;
            eprintln!("true-score {} K={k}: {:.3}", m.as_str(), result.modes_mean);
            rows.push(BenchRow { method: m.as_str().into(), formulation: "true-score".into(), result });
        }
    }
    write_bench(&cfg.output_dir, &rows, "modes discovered (true score)")
}

pub fn sweep(cfg: &RunConfig) -> Result<(), Failure> {
    let g = true_score_guidance(cfg)?;
    let scfg = cfg.solver();
    let s = &cfg.sweep;
    let seeds = trial_seeds(s.trials)?;
    let gmm = s.gmm.resolve()?;
    cfg.write_resolved()?;

    let grid = sweep_heatmap(&gmm, &s.noise_levels, &s.strengths, &g, &scfg, s.k, &seeds, s.radius_mult)?;
    let path = cfg.output_dir.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["noise_level", "strength", "modes_mean", "modes_std"]).map_err(|e| Failure::io(&path, e))?;
    for (i, row) in grid.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            w.write_record([num(grid.noise_levels[i]), num(grid.strengths[j]), num(cell.modes_mean), num(cell.modes_std)])
                .map_err(|e| Failure::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;

    let values: Vec<Vec<f64>> = grid.cells.iter().map(|r| r.iter().map(|c| c.modes_mean).collect()).collect();
    let title = format!("{} modes, K={}", cfg.guidance.method.as_str(), s.k);
    write_text(
        &cfg.output_dir.join("sweep.svg"),
        &svg::heatmap(&title, "noise level", &grid.noise_levels, "strength", &grid.strengths, &values),
    )
}

pub fn inpaint_demo(cfg: &RunConfig) -> Result<(), Failure> {
    let guided = cfg.guidance()?;
    let plain = GuidanceConfig { method: Method::None, ..guided.clone() };
    let scfg: SolverConfig = cfg.solver();
    let p = &cfg.inpaint;
    let seeds = trial_seeds(p.trials)?;
    if p.k == 0 {
        return Err(Failure::Config("k must be at least 1".into()));
    }
    let task = InpaintTask::new(Array1::from(p.y.clone()), p.mask.clone())?;
    let source = cfg.source.resolve()?;
    let target = cfg.target.resolve()?;
    let ckpt = load_checkpoint(p.checkpoint.as_ref(), "inpaint-demo")?;
    if task.mask.iter().all(|&m| m) {
        eprintln!("warning: mask observes every coordinate; every output equals y");
    }
    let radius = if p.radius_mult > 0.0 { p.radius_mult } else { DEFAULT_RADIUS_MULT };
    cfg.write_resolved()?;

    let runs = seeds
        .par_iter()
        .map(|&trial| {
            let mut r = rng::stream(cfg.seed, trial);
            let x0 = ParticleBatch::new(gmm_sample(&source, &mut r, p.k), 0.0);
            let a = mcg_inpaint(&ckpt.field, &task, &x0, &plain, &scfg)?;
            let b = mcg_inpaint(&ckpt.field, &task, &x0, &guided, &scfg)?;
            Ok((a, b))
        })
        .collect::<Result<Vec<_>, dppflow::Error>>()?;
    let fully_observed = runs.first().is_some_and(|(a, _)| a.status == InpaintStatus::FullyObserved);

    let dir = &cfg.output_dir;
    let path = dir.join("inpaint-coverage.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["trial", "unguided_modes", "guided_modes"]).map_err(|e| Failure::io(&path, e))?;
    for (trial, (a, b)) in seeds.iter().zip(&runs) {
        let ca = count_modes(a.batch.points.view(), &target, radius);
        let cb = count_modes(b.batch.points.view(), &target, radius);
        w.write_record([num(trial), num(ca), num(cb)]).map_err(|e| Failure::io(&path, e))?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;

    let d = task.y.len();
    let path = dir.join("inpaint-samples.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(dim_header(&["trial", "variant", "particle"], d)).map_err(|e| Failure::io(&path, e))?;
    for (trial, (a, b)) in seeds.iter().zip(&runs) {
        for (variant, out) in [("unguided", a), ("guided", b)] {
            for (i, row) in out.batch.points.rows().into_iter().enumerate() {
                let head = [num(trial), variant.to_string(), num(i)];
                w.write_record(head.into_iter().chain(row.iter().map(num))).map_err(|e| Failure::io(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;

    let gather = |pick: fn(&(dppflow::guidance::InpaintOutcome, dppflow::guidance::InpaintOutcome)) -> &ParticleBatch| {
        runs.iter().flat_map(|r| xy(pick(r).points.view())).collect::<Vec<_>>()
    };
    let series = vec![
        ("target".to_string(), reference(&target, cfg.seed)),
        ("unguided".to_string(), gather(|r| &r.0.batch)),
        ("guided".to_string(), gather(|r| &r.1.batch)),
    ];
    let title = if fully_observed { "inpainting (fully observed)".to_string() } else { format!("inpainting K={}", p.k) };
    write_text(&dir.join("inpaint.svg"), &svg::scatter(&title, &series))
}
