//! End-to-end runs of the `car` binary.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn car(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_car"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn car")
}

fn ok(args: &[&str]) -> Output {
    let out = car(args);
    assert!(
        out.status.success(),
        "car {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_synth(dir: &Path, n: &str, h: &str) {
    ok(&["gen-synth", "--n", n, "--h", h, "--seed", "3", "--out", s(dir)]);
}

#[test]
fn gen_synth_then_train_within_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("syn");
    let out = tmp.path().join("run");
    let start = Instant::now();
    gen_synth(&data, "1000", "0.2");
    ok(&["train", "--data", s(&data), "--out", s(&out), "--seed", "1"]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.1} s");
    assert!(out.join("model.json").exists());
    let line = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["car_enabled"], true);
    let acc = v["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let eval = ok(&["eval", "--data", s(&data), "--model", s(&out.join("model.json"))]);
    let v: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(v["test_accuracy"].as_f64().unwrap(), acc);
}

#[test]
fn zero_lambda_matches_baseline_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("syn");
    gen_synth(&data, "300", "0.5");
    let base = tmp.path().join("base");
    let car0 = tmp.path().join("car0");
    let common = ["--data", s(&data), "--hidden", "16", "--max-epochs", "30", "--seed", "4"];
    ok(&[&["train", "--mode", "baseline", "--out", s(&base)], &common[..]].concat());
    ok(&[&["train", "--mode", "car", "--lambda", "0", "--out", s(&car0)], &common[..]].concat());
    let a = std::fs::read(base.join("model.json")).unwrap();
    let b = std::fs::read(car0.join("model.json")).unwrap();
    assert!(a == b, "checkpoints differ");
}

#[test]
fn repeated_runs_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("syn");
    gen_synth(&data, "200", "0.4");
    let fingerprint = |dir: &Path| {
        ok(&["train", "--data", s(&data), "--out", s(dir), "--hidden", "8", "--max-epochs", "15", "--seed", "9"]);
        let mut v: serde_json::Value =
            serde_json::from_str(std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap().trim()).unwrap();
        v["wall_clock_seconds"] = serde_json::Value::Null;
        (v, std::fs::read(dir.join("model.json")).unwrap())
    };
    let a = fingerprint(&tmp.path().join("a"));
    let b = fingerprint(&tmp.path().join("b"));
    assert_eq!(a.0, b.0);
    assert!(a.1 == b.1);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(car(&[]).status.code(), Some(1));
    assert_eq!(car(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(car(&["train", "--mechanism", "gat"]).status.code(), Some(1));
    assert_eq!(car(&["--help"]).status.code(), Some(0));

    let missing = tmp.path().join("nothing");
    let out = tmp.path().join("o");
    let r = car(&["train", "--data", s(&missing), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("meta.json"));

    let data = tmp.path().join("syn");
    gen_synth(&data, "100", "0.5");
    let r = car(&["train", "--data", s(&data), "--out", s(&out), "--mechanism", "mlp"]);
    assert_eq!(r.status.code(), Some(1));
    let r = car(&["train", "--data", s(&data), "--out", s(&out), "--mode", "baseline", "--lambda", "1"]);
    assert_eq!(r.status.code(), Some(1));

    std::fs::write(data.join("edges.tsv"), "0\tnot-a-node\n").unwrap();
    let r = car(&["train", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("edges.tsv:1"));
}

#[test]
fn small_sweep_prune_and_explain() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("syn");
    gen_synth(&data, "150", "0.3");
    let sweep = tmp.path().join("sweep");
    ok(&[
        "sweep", "--data", s(&data), "--out", s(&sweep), "--seeds", "0,1,2", "--mechanisms", "gat",
        "--layers", "1", "--heads", "1", "--hidden", "8", "--lambdas", "0.5,1", "--max-epochs", "10",
    ]);
    let records = std::fs::read_to_string(sweep.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3 * 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sweep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["num_records"], 9);

    let base = tmp.path().join("base");
    let reg = tmp.path().join("reg");
    let common = ["--data", s(&data), "--hidden", "8", "--max-epochs", "10"];
    ok(&[&["train", "--mode", "baseline", "--out", s(&base)], &common[..]].concat());
    ok(&[&["train", "--out", s(&reg)], &common[..]].concat());
    let (bm, cm) = (base.join("model.json"), reg.join("model.json"));

    let prune = tmp.path().join("prune");
    ok(&[
        "prune", "--data", s(&data), "--baseline-model", s(&bm), "--car-model", s(&cm), "--thresholds", "0,0.3",
        "--seeds", "0,1", "--gcn-hidden", "8", "--max-epochs", "10", "--out", s(&prune),
    ]);
    let tsv = std::fs::read_to_string(prune.join("rewiring.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 2 * 2 * 2);
    assert!(prune.join("rewiring_summary.json").exists());

    let explain = ok(&["explain", "--data", s(&data), "--model-a", s(&bm), "--model-b", s(&cm), "--top-k", "5"]);
    let text = String::from_utf8(explain.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 5);
    assert!(text.lines().nth(1).unwrap().contains('%'));
}
