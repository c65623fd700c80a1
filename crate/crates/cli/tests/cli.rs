use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_TRAIN: &str = r#"
seed = 3

[path]
formulation = ["cfm", "mb-ot"]

[train]
batch_size = 32
steps = 40
hidden = 16
layers = 2
"#;

fn dppflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dppflow")).args(args).env_remove("DPPFLOW_SEED").output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

/// Trains the two small checkpoints once per call site.
fn trained(tmp: &TempDir) -> PathBuf {
    let cfg = write_config(tmp.path(), "train.toml", SMALL_TRAIN);
    let out = tmp.path().join("models");
    ok(dppflow(&["train", "--config", s(&cfg), "--out", s(&out)]));
    out
}

fn csv_rows(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().skip(1).map(str::to_owned).collect()
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[guidance]\nstrenght = 2.0\n");
    let out = dppflow(&["sweep", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("strenght"));
}

#[test]
fn missing_formulation_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[train]\nsteps = 5\n");
    let out = dppflow(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("formulation"));

    let cfg = write_config(tmp.path(), "d.toml", "[path]\nsigma_fm = 0.0\n");
    let out = dppflow(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("formulation"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = dppflow(&["sample", "--checkpoint", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn training_writes_one_checkpoint_per_formulation_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = trained(&tmp);
    for f in ["cfm", "mb-ot"] {
        assert!(a.join(format!("model-{f}.json")).exists());
        let log = csv_rows(&a.join(format!("train-log-{f}.csv")));
        assert_eq!(log.len(), 40);
    }
    assert!(a.join("train-loss.svg").exists());
    assert!(a.join("resolved.toml").exists());

    let b = tmp.path().join("again");
    let cfg = tmp.path().join("train.toml");
    ok(dppflow(&["train", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["cfm", "mb-ot"] {
        let name = format!("model-{f}.json");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn sampling_reduction_row_counts_and_seed_precedence() {
    let tmp = TempDir::new().unwrap();
    let models = trained(&tmp);
    let ckpt = models.join("model-cfm.json");
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["sample", "--checkpoint", s(&ckpt), "--out", s(&out), "--k", "5", "--steps", "20"];
        args.extend_from_slice(extra);
        ok(dppflow(&args));
        out
    };

    let none = run("none", &["--method", "none"]);
    let zero = run("zero", &["--method", "diverseflow", "--strength", "0"]);
    assert_eq!(fs::read(none.join("samples.csv")).unwrap(), fs::read(zero.join("samples.csv")).unwrap());
    assert_eq!(csv_rows(&none.join("samples.csv")).len(), 5);
    assert!(none.join("scatter.svg").exists());

    let traj = run("traj", &["--dump-trajectory"]);
    let header = fs::read_to_string(traj.join("trajectory.csv")).unwrap().lines().next().unwrap().to_owned();
    assert_eq!(header, "trial,step,t,particle,dim0,dim1");
    assert_eq!(csv_rows(&traj.join("trajectory.csv")).len(), 21 * 5);

    // resolved config reproduces the run bitwise
    let again = tmp.path().join("rerun");
    ok(dppflow(&["sample", "--config", s(&traj.join("resolved.toml")), "--out", s(&again)]));
    assert_eq!(fs::read(traj.join("samples.csv")).unwrap(), fs::read(again.join("samples.csv")).unwrap());
    assert_eq!(fs::read(traj.join("trajectory.csv")).unwrap(), fs::read(again.join("trajectory.csv")).unwrap());

    // DPPFLOW_SEED overrides the config seed, a flag overrides both
    let env_run = |name: &str, seed_env: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["sample", "--checkpoint", s(&ckpt), "--out", s(&out), "--steps", "5"];
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_dppflow")).args(&args).env("DPPFLOW_SEED", seed_env).output().unwrap();
        ok(o);
        fs::read_to_string(out.join("resolved.toml")).unwrap()
    };
    assert!(env_run("env", "17", &[]).contains("seed = 17"));
    assert!(env_run("flag", "17", &["--seed", "4"]).contains("seed = 4"));
}

#[test]
fn bench_modes_rows_per_pair_and_single_trial_std() {
    let tmp = TempDir::new().unwrap();
    let models = trained(&tmp);
    let out = tmp.path().join("bench");
    let ckpts = format!("{},{}", s(&models.join("model-cfm.json")), s(&models.join("model-mb-ot.json")));
    ok(dppflow(&["bench-modes", "--checkpoint", &ckpts, "--trials", "1", "--steps", "5", "--out", s(&out)]));
    let rows = csv_rows(&out.join("bench-modes.csv"));
    assert_eq!(rows.len(), 2 * 2 * 9);
    for pair in ["none,cfm", "diverseflow,cfm", "none,mb-ot", "diverseflow,mb-ot"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{pair},"))).count(), 9, "{pair}");
    }
    for r in &rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[3], "1");
        assert_eq!(cols[5], "0");
    }
    let svg = fs::read_to_string(out.join("bench-modes.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
}

#[test]
fn sweep_grid_shape_and_zero_strength_column() {
    let tmp = TempDir::new().unwrap();
    let one = tmp.path().join("one");
    ok(dppflow(&["sweep", "--noise-levels", "0.3", "--strengths", "1", "--trials", "2", "--k", "3", "--steps", "20", "--out", s(&one)]));
    assert_eq!(csv_rows(&one.join("sweep.csv")).len(), 1);

    let grid = tmp.path().join("grid");
    ok(dppflow(&[
        "sweep",
        "--noise-levels",
        "0,1",
        "--strengths",
        "0,2,5",
        "--trials",
        "3",
        "--k",
        "4",
        "--steps",
        "20",
        "--out",
        s(&grid),
    ]));
    let rows = csv_rows(&grid.join("sweep.csv"));
    assert_eq!(rows.len(), 6);
    assert!(fs::read_to_string(grid.join("sweep.svg")).unwrap().contains("<rect"));

    // W = 0 cells agree with an unguided run of the same λ
    let plain = tmp.path().join("plain");
    ok(dppflow(&[
        "sweep",
        "--method",
        "none",
        "--noise-levels",
        "0,1",
        "--strengths",
        "7",
        "--trials",
        "3",
        "--k",
        "4",
        "--steps",
        "20",
        "--out",
        s(&plain),
    ]));
    let plain_rows = csv_rows(&plain.join("sweep.csv"));
    for (lam, p) in ["0", "1"].iter().zip(&plain_rows) {
        let zero = rows.iter().find(|r| r.starts_with(&format!("{lam},0,"))).unwrap();
        let tail = |r: &str| r.splitn(3, ',').nth(2).unwrap().to_owned();
        assert_eq!(tail(zero), tail(p));
    }
}

#[test]
fn bench_ideal_labels_true_score() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ideal");
    ok(dppflow(&["bench-ideal", "--k-min", "3", "--k-max", "4", "--trials", "2", "--steps", "20", "--out", s(&out)]));
    let rows = csv_rows(&out.join("bench-modes.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("true-score")));
}

#[test]
fn inpaint_demo_coverage_and_fully_observed_mask() {
    let tmp = TempDir::new().unwrap();
    let models = trained(&tmp);
    let ckpt = models.join("model-cfm.json");

    let out = tmp.path().join("inpaint");
    ok(dppflow(&["inpaint-demo", "--checkpoint", s(&ckpt), "--trials", "3", "--k", "3", "--steps", "10", "--out", s(&out)]));
    let cov = fs::read_to_string(out.join("inpaint-coverage.csv")).unwrap();
    assert!(cov.starts_with("trial,unguided_modes,guided_modes\n"));
    assert_eq!(cov.lines().count(), 4);

    let full = tmp.path().join("full");
    let o = ok(dppflow(&[
        "inpaint-demo",
        "--checkpoint",
        s(&ckpt),
        "--trials",
        "2",
        "--k",
        "3",
        "--steps",
        "10",
        "--y",
        "1.5,-2",
        "--mask",
        "1,1",
        "--out",
        s(&full),
    ]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let rows = csv_rows(&full.join("inpaint-samples.csv"));
    assert_eq!(rows.len(), 2 * 2 * 3);
    for r in rows {
        assert!(r.ends_with(",1.5,-2"), "{r}");
    }

    // strength 0 reproduces the unguided column exactly
    let zero = tmp.path().join("zero");
    ok(dppflow(&[
        "inpaint-demo",
        "--checkpoint",
        s(&ckpt),
        "--trials",
        "3",
        "--k",
        "3",
        "--steps",
        "10",
        "--strength",
        "0",
        "--out",
        s(&zero),
    ]));
    for line in csv_rows(&zero.join("inpaint-coverage.csv")) {
        let c: Vec<&str> = line.split(',').collect();
        assert_eq!(c[1], c[2]);
    }
}
