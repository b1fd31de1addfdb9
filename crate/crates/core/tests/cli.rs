use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gdgat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdgat"))
        .args(args)
        .current_dir(cwd)
        .env("GDGAT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().expect("output line")).expect("json line")
}

/// The one-line JSON error on stderr.
fn error_of(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    let v: Value = serde_json::from_str(text.trim_end()).expect("json error");
    v["error"].clone()
}

fn synth(dir: &Path, scenario: &str) {
    let o = gdgat(&["synth", "--scenario", scenario, "--seed", "3", "--out", "data"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_and_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gdgat(&["gradcheck", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["pass"], Value::Bool(true));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--bogus"][..], &["frobnicate"], &["synth", "--scenario", "nope", "--out", "x"]] {
        let o = gdgat(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(error_of(&o)["kind"], "usage");
    }
    assert_eq!(gdgat(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn missing_file_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = gdgat(&["train", "--train", "absent.jsonl", "--variant", "wo_lp"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_of(&o)["kind"], "missing_file");
    let o = gdgat(&["validate", "--probs", "absent.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn class_count_mismatch_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "soft-vs-hard");
    fs::rename(d.join("data"), d.join("matres")).unwrap();
    synth(d, "separable");
    let o = gdgat(&["train", "--config", "matres/run.toml", "--epochs", "1", "--output-dir", "r"], d);
    assert!(o.status.success());
    let o = gdgat(
        &[
            "eval", "--checkpoint", "r/checkpoint.json", "--label-set", "tb_dense",
            "--test", "data/test.jsonl", "--probs", "data/probs.jsonl",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_of(&o)["kind"], "dimension_mismatch");
}

#[test]
fn corrupt_probability_file_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "separable");
    let good = gdgat(
        &["validate", "--label-set", "tb_dense", "--corpus", "data/test.jsonl", "--probs", "data/probs.jsonl"],
        d,
    );
    assert!(good.status.success());
    assert_eq!(stdout_json(&good)["covers_corpora"], Value::Bool(true));

    let text = fs::read_to_string(d.join("data/probs.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[6] = lines[6].replacen("\"probs\":[", "\"probs\":[0.9,", 1);
    fs::write(d.join("bad.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = gdgat(&["validate", "--label-set", "tb_dense", "--probs", "bad.jsonl"], d);
    assert_eq!(o.status.code(), Some(5));
    let e = error_of(&o);
    assert_eq!(e["kind"], "invalid_format");
    assert_eq!(e["line"], 7);
    assert!(e["message"].as_str().unwrap().contains(":7:"));
}

#[test]
fn uncovered_corpus_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "separable");
    let text = fs::read_to_string(d.join("data/probs.jsonl")).unwrap();
    let kept: Vec<&str> = text.lines().take(20).collect();
    fs::write(d.join("few.jsonl"), kept.join("\n") + "\n").unwrap();
    let o = gdgat(
        &["validate", "--label-set", "tb_dense", "--corpus", "data/train.jsonl", "--probs", "few.jsonl"],
        d,
    );
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn bad_config_exits_seven() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[train]\nepochz = 3\n").unwrap();
    let o = gdgat(&["train", "--config", "run.toml"], dir.path());
    assert_eq!(o.status.code(), Some(7));
    assert!(error_of(&o)["message"].as_str().unwrap().contains("epochz"));
    let o = gdgat(&["train", "--variant", "wo_gd"], dir.path());
    assert_eq!(o.status.code(), Some(7));
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "separable");
    let args = ["train", "--config", "data/run.toml", "--epochs", "2", "--output-dir", "out"];
    let snapshot = || {
        assert!(gdgat(&args, d).status.success());
        ["checkpoint.json", "history.jsonl"].map(|f| fs::read(d.join("out").join(f)).unwrap())
    };
    let first = snapshot();
    assert_eq!(first, snapshot());

    let history = String::from_utf8(first[1].clone()).unwrap();
    let header: Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["seed"], 3);
    assert_eq!(header["config"]["train"]["epochs"], 2);
    let ckpt: Value = serde_json::from_slice(&first[0]).unwrap();
    assert_eq!(ckpt["config"], header["config"]);
}

#[test]
fn eval_uses_embedded_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "separable");
    assert!(gdgat(&["train", "--config", "data/run.toml", "--output-dir", "out"], d).status.success());
    let o = gdgat(&["eval", "--checkpoint", "out/checkpoint.json", "--output", "eval.json"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["seed"], 3);
    assert!(v["report"]["micro_f1"].as_f64().unwrap() > 0.95);
    assert!(String::from_utf8_lossy(&o.stdout).contains("micro-F1"));
}

#[test]
fn ablate_writes_four_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "soft-vs-hard");
    let o = gdgat(&["ablate", "--config", "data/run.toml", "--output-dir", "ab"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(d.join("ab/ablation.json")).unwrap()).unwrap();
    let f1 = |k: usize| v["reports"][k]["micro_f1"].as_f64().unwrap();
    let names: Vec<&str> = (0..4).map(|k| v["reports"][k]["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "wo_pi", "wo_gd", "wo_lp"]);
    assert!(f1(0) - f1(1) >= 0.05 && f1(1) > f1(2));
    assert!(d.join("ab/full/checkpoint.json").exists());
    assert!(!d.join("ab/wo_gd").exists());
    let table = fs::read_to_string(d.join("ab/ablation.txt")).unwrap();
    assert!(table.contains("wo_lp"));
}
