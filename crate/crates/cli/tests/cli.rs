//! End-to-end runs of the `predattn` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[dataset]
sequences = 4
frames = 12

[predictor]
epochs = 1
window = 6

[evaluator]
epochs = 1
max_horizon = 3

[metrics.shifted_ball]
noise_draws = 2

[attention]
sequences = 2
thresholds = [0.5]
seeds = [1]
"#;

fn predattn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_predattn"))
        .arg("--config")
        .arg(dir.join("cfg.toml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = predattn(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fs::write(dir.path().join("cfg.toml"), format!("output_dir = {:?}\n{CONFIG}", out.display().to_string())).unwrap();
    dir
}

#[test]
fn every_command_runs() {
    let dir = setup();
    let d = dir.path();
    let out = d.join("out");

    let printed = ok(d, &["gen-data"]);
    assert!(printed.trim_end().ends_with("manifest.csv"));
    assert_eq!(fs::read_dir(out.join("data")).unwrap().count(), 5);

    ok(d, &["train", "--target", "predictor"]);
    for f in ["predictor.ckpt", "predictor_loss.csv", "predictor_validation.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    ok(d, &["train", "--target", "evaluator"]);
    assert!(out.join("evaluator_validation.csv").is_file());

    ok(d, &["metrics"]);
    let table = fs::read_to_string(out.join("metrics_shifted_ball.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "offset,mss,esim,esim2,esim4");
    assert_eq!(table.lines().count(), 5);

    ok(d, &["metrics", "--set", "metrics.scenario=noise", "--set", "metrics.noise_sequences=1"]);
    assert_eq!(fs::read_to_string(out.join("metrics_noise.csv")).unwrap().lines().count(), 11);

    let aer = out.join("data/seq_0000.aer").display().to_string();
    ok(
        d,
        &["metrics", "--set", "metrics.scenario=pair", "--set", &format!("metrics.frames_a={aer:?}"), "--set", &format!("metrics.frames_b={aer:?}")],
    );
    let pair = fs::read_to_string(out.join("metrics_pair.csv")).unwrap();
    for line in pair.lines().skip(1) {
        assert!(line.split(',').skip(1).all(|v| v == "1.000000"), "self-pair row {line}");
    }

    ok(d, &["run-attention"]);
    let summary = fs::read_to_string(out.join("attention/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("attention/trace_0001.csv").is_file());
    assert!(out.join("attention/frames/seq_0000").is_dir());

    ok(d, &["compare"]);
    let compare = fs::read_to_string(out.join("compare.csv")).unwrap();
    let policies: Vec<&str> = compare.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(policies, ["predictive", "random", "periodic"]);

    ok(d, &["dump-frames", "--sequence", "2"]);
    assert_eq!(fs::read_dir(out.join("frames/seq_0002")).unwrap().count(), 13);
}

#[test]
fn missing_seed_fails() {
    let dir = setup();
    fs::write(dir.path().join("cfg.toml"), "[dataset]\nsequences = 2\n").unwrap();
    let out = predattn(dir.path(), &["gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn seed_flag_and_overrides() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gen-data", "--seed", "9", "--set", "dataset.sequences=2"]);
    let manifest = fs::read_to_string(d.join("out/data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
}

#[test]
fn unknown_key_is_rejected() {
    let dir = setup();
    let out = predattn(dir.path(), &["gen-data", "--set", "predictor.epochz=3"]);
    assert!(!out.status.success());
}

#[test]
fn commands_need_their_inputs() {
    let dir = setup();
    let out = predattn(dir.path(), &["train", "--target", "predictor"]);
    assert!(!out.status.success(), "training without a dataset must fail");
}
