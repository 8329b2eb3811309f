use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_outfit-compat"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

const DATA: [&str; 4] = ["--items", "items.jsonl", "--pairs", "pairs.csv"];

fn with_data(cmd: &str, extra: &[&str]) -> Vec<String> {
    std::iter::once(cmd).chain(DATA).chain(extra.iter().copied()).map(String::from).collect()
}

fn run_owned(dir: &Path, args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(dir, &refs)
}

fn small_dataset(dir: &Path) {
    let out = run(dir, &["gen-synthetic", "--n-tops", "120", "--n-bottoms", "120", "--n-pairs", "500", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["pairs"], 500);
    assert_eq!(report["seed"], 3);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    for f in ["items.jsonl", "pairs.csv", "rules.txt", "lexicon.toml"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let pairs = std::fs::read_to_string(d.join("pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 501);

    let mined = run_owned(d, with_data("mine-rules", &["--lexicon", "lexicon.toml", "--rules", "mined.txt"]));
    assert!(mined.status.success(), "{}", String::from_utf8_lossy(&mined.stderr));
    assert!(!std::fs::read_to_string(d.join("mined.txt")).unwrap().trim().is_empty());

    let train = run_owned(
        d,
        with_data("train", &["--rules", "rules.txt", "--epochs", "3", "--log", "log.tsv", "--batch", "64"]),
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert_eq!(json(&train)["history"].as_array().unwrap().len(), 3);
    let stderr = String::from_utf8_lossy(&train.stderr);
    assert!(stderr.contains("epoch\tloss\ttrain_auc\tvalid_auc\trho"));

    let log = std::fs::read_to_string(d.join("log.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "epoch\tloss\ttrain_auc\tvalid_auc\trho");
    for (n, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 5, "{line}");
        assert_eq!(fields[0], (n + 1).to_string());
        for f in &fields[1..] {
            let v: f64 = f.parse().unwrap();
            assert!(v.is_finite());
        }
    }

    let ckpt: Value = serde_json::from_str(&std::fs::read_to_string(d.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["version"], 1);

    for mode in ["p", "q"] {
        let eval = run_owned(d, with_data("evaluate", &["--rules", "rules.txt", "--mode", mode]));
        assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
        let auc = json(&eval)["report"]["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }

    for split in ["observed", "unobserved", "all"] {
        let ret = run_owned(d, with_data("retrieve", &["--split", split, "--t-candidates", "5"]));
        assert!(ret.status.success(), "{}", String::from_utf8_lossy(&ret.stderr));
        let report = json(&ret);
        assert_eq!(report["report"]["split"], split);
        assert_eq!(report["report"]["t_candidates"], 5);
    }

    let resumed = run_owned(
        d,
        with_data("train", &["--rules", "rules.txt", "--resume", "checkpoint.json", "--epochs", "1", "--checkpoint", "more.json"]),
    );
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(json(&resumed)["final"]["epoch"].as_u64().unwrap(), 4);
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    for name in ["a.json", "b.json"] {
        let out = run_owned(d, with_data("train", &["--epochs", "2", "--seed", "5", "--checkpoint", name]));
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
}

#[test]
fn baselines_need_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    for scorer in ["pop", "rand"] {
        let out = run_owned(d, with_data("evaluate", &["--scorer", scorer]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(json(&out)["report"]["auc"].is_number());
    }
}

fn assert_error(out: &Output, code: i32, category: &str) {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(out)["error"]["category"], category);
    assert!(String::from_utf8_lossy(&out.stderr).contains(category));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_error(&run_owned(d, with_data("train", &[])), 11, "io");

    small_dataset(d);
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_error(&run_owned(d, with_data("evaluate", &["--checkpoint", "bad.json"])), 3, "parse");

    std::fs::write(d.join("old.json"), r#"{"version": 99}"#).unwrap();
    assert_error(&run_owned(d, with_data("evaluate", &["--checkpoint", "old.json"])), 9, "migration");

    assert_error(&run_owned(d, with_data("train", &["--lr=-1"])), 2, "rejected-input");
    // No checkpoint.json in this directory.
    assert_error(&run_owned(d, with_data("evaluate", &[])), 11, "io");

    std::fs::write(d.join("bad_rules.txt"), "colour: red +\n").unwrap();
    let out = run_owned(d, with_data("train", &["--rules", "bad_rules.txt"]));
    assert_ne!(out.status.code(), Some(0));
    assert!(json(&out)["error"]["category"].is_string());
}

#[test]
fn usage_errors_are_reported_by_clap() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["retrieve", "--split", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
}
