use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn modrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modrl")).args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    modrl(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("file exists")).expect("valid json")
}

fn metric(report: &Value, name: &str) -> f64 {
    report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == name)
        .unwrap_or_else(|| panic!("metric {name}"))["value"]
        .as_f64()
        .unwrap()
}

const SMALL: [&str; 6] = ["--set", "train.epochs=3", "--set", "data.size=200", "--set", "eval.contexts=50"];

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&["frobnicate", "--out", out]), 2);
    assert_eq!(code(&["train", "--config", "/no/such.toml", "--out", out]), 2);
    assert_eq!(code(&["train", "--set", "train.warp=1", "--out", out]), 2);
    assert_eq!(code(&["train", "--set", "train.eta=fast", "--out", out]), 2);
    assert_eq!(code(&["train", "--seed", "minus-one"]), 2);
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["--help"]), 0);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train\n").unwrap();
    assert_eq!(code(&["train", "--config", bad.to_str().unwrap(), "--out", out]), 2);
}

#[test]
fn engine_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&["gen-data", "--set", "data.noise=1.5", "--out", out]), 1);
    let manifest = json(&dir.path().join("manifest-gen-data.json"));
    assert!(manifest["error"].as_str().unwrap().contains("noise"));
}

#[test]
fn bench_reports_prediction_and_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["bench", "--preset", "table3", "--seed", "7", "--set", "bench.repetitions=1", "--out", out];
    assert_eq!(code(&args), 0);
    let report = json(&dir.path().join("bench-table3.json"));
    assert!((metric(&report, "predicted_speedup") - 3.8038).abs() < 1e-4);
    let measured = metric(&report, "measured_speedup");
    assert!(measured > 1.0, "{measured}");
    assert!(dir.path().join("bench-table3.csv").exists());
    let manifest = json(&dir.path().join("manifest-bench.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["provenance"]["preset"], "flag");
    assert_eq!(manifest["provenance"]["bench.repetitions"], "flag");
    assert_eq!(manifest["provenance"]["train.eta"], "default");
    assert_eq!(manifest["engine_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn train_is_reproducible_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let mut checkpoints = Vec::new();
    for rep in ["a", "b"] {
        let out = dir.path().join(rep);
        let mut args = vec!["train", "--seed", "7", "--out", out.to_str().unwrap()];
        args.extend(SMALL);
        assert_eq!(code(&args), 0);
        checkpoints.push(fs::read(out.join("checkpoint.json")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);

    let a = dir.path().join("a");
    let mut args = vec!["eval", "--seed", "7", "--out", a.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(code(&args), 0);
    let trained = metric(&json(&a.join("train.json")), "win_rate_vs_base");
    let evaluated = metric(&json(&a.join("eval.json")), "win_rate_vs_base");
    assert_eq!(trained, evaluated);
    assert!(a.join("manifest-train.json").exists() && a.join("manifest-eval.json").exists());

    let ckpt = a.join("checkpoint.json");
    let other = dir.path().join("attr");
    let sampled = [
        "attribute",
        "--out",
        other.to_str().unwrap(),
        "--set",
        &format!("attribute.checkpoint=\"{}\"", ckpt.display()),
    ];
    // The checkpoint holds three modules; the default fixture has four.
    assert_eq!(code(&sampled), 1);
    let mut sampled = sampled.to_vec();
    sampled.extend(["--set", "attribute.modules=3", "--set", "attribute.trials=20"]);
    assert_eq!(code(&sampled), 0);
    assert!(other.join("attribution.json").exists());
}

#[test]
fn file_then_flag_precedence_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 3\n[train]\neta = 0.2\nepochs = 2\n[data]\nsize = 100\n").unwrap();
    let out = dir.path().join("out");
    let args = [
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.eta=0.3",
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(code(&args), 0);
    let m = json(&out.join("manifest-gen-data.json"));
    assert_eq!(m["config"]["train"]["eta"], 0.3);
    assert_eq!(m["provenance"]["train.eta"], "flag");
    assert_eq!(m["config"]["train"]["epochs"], 2);
    assert_eq!(m["provenance"]["train.epochs"], "file");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["train"]["seed"], 3);
    assert_eq!(m["provenance"]["train.gamma"], "default");
    assert!(m["config"].get("out").is_none());
    let lines = fs::read_to_string(out.join("dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 100);
}

#[test]
fn training_on_a_generated_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&["gen-data", "--out", out, "--set", "data.size=150"]), 0);
    let data = dir.path().join("dataset.jsonl");
    let path_flag = format!("data.path=\"{}\"", data.display());
    let mut args = vec!["train", "--out", out, "--set", &path_flag];
    args.extend(SMALL);
    assert_eq!(code(&args), 0);
    assert_eq!(metric(&json(&dir.path().join("train.json")), "triples"), 150.0);
}
