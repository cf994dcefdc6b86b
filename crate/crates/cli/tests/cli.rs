use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcl_core::episodes::{load_embedding_pool, Split};

fn mcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcl"))
        .args(args)
        .env("MCL_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mcl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pools(dir: &Path) -> (PathBuf, PathBuf) {
    let train = dir.join("train.bin");
    let test = dir.join("test.bin");
    ok(&["gen-pool", "--classes", "16", "--items", "12", "--seed", "1", "--out", s(&train)]);
    ok(&[
        "gen-pool", "--classes", "16", "--items", "12", "--seed", "2", "--first-class", "1000", "--out", s(&test),
    ]);
    (train, test)
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn gen_pool_header_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for p in [&a, &b] {
        ok(&["gen-pool", "--classes", "64", "--items", "20", "--dim", "16", "--seed", "9", "--out", s(p)]);
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(&bytes[..8], b"MCLPOOL1");
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    assert_eq!((word(8), word(12), word(16)), (1280, 16, 64));
    let pool = load_embedding_pool(&a, Split::MetaTrain).unwrap();
    assert_eq!(pool.items.len(), 1280);
    assert_eq!(pool.num_classes(), 64);
}

#[test]
fn zero_steps_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = pools(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--train-pool", s(&train), "--steps", "0", "--out", s(&run)]);
    assert!(run.join("ckpt-final.bin").is_file());
    assert!(run.join("resolved.cfg").is_file());
    assert_eq!(csv_rows(&run.join("metrics.csv")), vec!["step,lr,task_loss,slct_loss,combined_loss"]);
}

#[test]
fn zero_lambda_still_logs_selectivity() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = pools(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train", "--train-pool", s(&train), "--steps", "3", "--lambda", "0", "--batch", "2", "--out", s(&run),
    ]);
    let rows = csv_rows(&run.join("metrics.csv"));
    assert_eq!(rows.len(), 4);
    for row in &rows[1..] {
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert!(f[3] > 0.0, "selectivity column empty: {row}");
        assert_eq!(f[2], f[4], "λ = 0 must leave the task loss alone");
    }
}

#[test]
fn invalid_family_lists_valid_ones_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = pools(dir.path());
    let run = dir.path().join("run");
    let out = mcl(&["train", "--train-pool", s(&train), "--family", "rnn", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for f in ["transformer", "linear_tf", "performer", "mamba"] {
        assert!(err.contains(f), "{err}");
    }
    assert!(!run.exists());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "lambda = 0.5\nlearning_speed = 3\n").unwrap();
    let run = dir.path().join("run");
    let out = mcl(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning-speed"));
    assert!(!run.exists());
    let out = mcl(&["train", "--no-such-flag", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-flag"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = pools(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("train_pool = {}\nsteps = 0\nlambda = 0.25\nshots = 3\n", s(&train))).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--lambda", "0.75", "--out", s(&run)]);
    let resolved = fs::read_to_string(run.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("lambda = 0.75"));
    assert!(resolved.contains("shots = 3"));
    assert!(resolved.contains("steps = 0"));
}

#[test]
fn missing_pool_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = mcl(&["train", "--train-pool", "/nonexistent/pool.bin", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists());
}

#[test]
fn eval_sweep_and_export_on_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = pools(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--train-pool", s(&train), "--steps", "0", "--out", s(&run)]);
    let ckpt = run.join("ckpt-final.bin");
    let before = fs::read(&ckpt).unwrap();

    let ev = dir.path().join("ev");
    ok(&[
        "eval", "--checkpoint", s(&ckpt), "--test-pool", s(&test), "--episodes", "100", "--out", s(&ev),
    ]);
    let rows = csv_rows(&ev.join("eval").join("eval.csv"));
    assert_eq!(rows[0], "setting,K,S,sigma,episodes,metric_mean,metric_std");
    let acc: f64 = rows[1].split(',').nth(5).unwrap().parse().unwrap();
    // 2500 queries at chance 1/200
    let sd = (0.005f64 * 0.995 / 2500.0).sqrt();
    assert!((acc - 0.005).abs() <= 3.0 * sd, "untrained accuracy {acc}");

    let sw = dir.path().join("sw");
    ok(&[
        "sweep", "--checkpoint", s(&ckpt), "--test-pool", s(&test), "--episodes", "2", "--axis", "tasks", "--values",
        "5,8,10,12", "--tests-per-class", "1", "--out", s(&sw),
    ]);
    assert_eq!(csv_rows(&sw.join("eval").join("sweep-tasks.csv")).len(), 5);
    ok(&[
        "sweep", "--checkpoint", s(&ckpt), "--test-pool", s(&test), "--episodes", "2", "--axis", "noise", "--values",
        "0,1,2,4,6,8,10", "--out", s(&sw),
    ]);
    assert_eq!(csv_rows(&sw.join("eval").join("sweep-noise.csv")).len(), 8);

    let ex = dir.path().join("ex");
    ok(&["export-assoc", "--checkpoint", s(&ckpt), "--test-pool", s(&test), "--out", s(&ex)]);
    let matrix = csv_rows(&ex.join("assoc").join("assoc-0.csv"));
    // 5 tasks × 5 test queries, 2 columns of labels + 2·K·S scores
    assert_eq!(matrix.len(), 1 + 25);
    assert_eq!(matrix[1].split(',').count(), 2 + 2 * 5 * 2);
    assert_eq!(csv_rows(&ex.join("assoc").join("assoc-0.positions.csv")).len(), 1 + 20);

    assert_eq!(before, fs::read(&ckpt).unwrap(), "evaluation must not touch the checkpoint");
}

#[test]
fn family_mismatch_is_descriptive() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = pools(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--train-pool", s(&train), "--steps", "0", "--out", s(&run)]);
    let ev = dir.path().join("ev");
    let out = mcl(&[
        "eval", "--checkpoint", s(&run.join("ckpt-final.bin")), "--test-pool", s(&test), "--family", "transformer",
        "--out", s(&ev),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mamba") && err.contains("transformer"), "{err}");
    assert!(!ev.exists());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = pools(dir.path());
    let base = [
        "train", "--train-pool", s(&train), "--batch", "2", "--hidden", "16", "--state-size", "4", "--steps", "4",
    ];
    let full = dir.path().join("full");
    let mut args = base.to_vec();
    args.extend(["--checkpoint-every", "2", "--out", s(&full)]);
    ok(&args);
    let resumed = dir.path().join("resumed");
    let ckpt2 = full.join("ckpt-0000002.bin");
    let mut args = base.to_vec();
    args.extend(["--resume", s(&ckpt2), "--out", s(&resumed)]);
    ok(&args);
    assert_eq!(
        fs::read(full.join("ckpt-final.bin")).unwrap(),
        fs::read(resumed.join("ckpt-final.bin")).unwrap()
    );
    let bad = dir.path().join("bad");
    let mut args = base.to_vec();
    args.extend(["--resume", s(&ckpt2), "--family", "transformer", "--out", s(&bad)]);
    let out = mcl(&args);
    assert!(!out.status.success());
    assert!(!bad.exists());
}
