use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mps-seqmodel"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained_model(dir: &Path, n: &str, fraction: &str) -> std::path::PathBuf {
    let data = dir.join("train.txt");
    let model = dir.join("model.mps");
    run(&["generate", "--n", n, "--fraction", fraction, "--seed", "5", "--output", path(&data)]);
    run(&["train", "--data", path(&data), "--output", path(&model)]);
    model
}

#[test]
fn full_population_model_matches_parity_target() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path(), "8", "1");
    let text = stdout(&run(&["evaluate", "--model", path(&model), "--target", "parity"]));
    let value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
            .unwrap()
    };
    assert!((value("overlap ") - 1.0).abs() < 1e-10, "{text}");
    assert!(value("distance ").abs() < 1e-10, "{text}");
}

#[test]
fn constrained_sampling_echoes_fixed_bits() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path(), "8", "0.5");
    let text = stdout(&run(&[
        "sample", "--model", path(&model), "--count", "5", "--fix", "1=0", "--fix", "2=1",
    ]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for l in lines {
        assert_eq!(l.len(), 8);
        assert!(l.starts_with("01"), "{l}");
    }
}

#[test]
fn prediction_grid_has_twenty_points() {
    let text = stdout(&run(&["predict", "--n", "16", "--grid", "0.01:0.2:0.01"]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "f,N_T,theta,overlap,distance");
    assert_eq!(lines.len(), 21);
}

#[test]
fn experiment_output_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run(&["experiment", "--n", "10", "--grid", "0.1,0.3", "--trials", "3", "--seed", "9", "--output", path(d.path())]);
    }
    for name in ["rows.csv", "aggregate.csv", "series.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let rows = std::fs::read_to_string(a.path().join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 7);
}

#[test]
fn thread_cap_does_not_change_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = |d: &Path| {
        vec![
            "experiment".to_string(), "--n".into(), "10".into(), "--grid".into(), "0.2".into(),
            "--trials".into(), "4".into(), "--output".into(), path(d).to_string(),
        ]
    };
    assert!(bin().args(args(a.path())).env("MPS_SEQMODEL_THREADS", "1").status().unwrap().success());
    assert!(bin().args(args(b.path())).env("MPS_SEQMODEL_THREADS", "3").status().unwrap().success());
    assert_eq!(
        std::fs::read(a.path().join("rows.csv")).unwrap(),
        std::fs::read(b.path().join("rows.csv")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = bin().args(["predict", "--n", "16", "--grid", "0:1:0.5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["sample", "--model", "m", "--fix", "1=2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_constraint_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path(), "4", "1");
    let out = bin()
        .args(["sample", "--model", path(&model), "--fix", "1=1", "--fix", "2=0", "--fix", "3=0", "--fix", "4=0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn oracle_check_passes() {
    let text = stdout(&run(&["oracle-check"]));
    assert_eq!(text.lines().filter(|l| l.contains(" PASS: ")).count(), 8, "{text}");
}
