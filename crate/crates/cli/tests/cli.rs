use std::path::Path;
use std::process::{Command, Output};

use moebert::checkpoint::load_checkpoint;
use moebert::pipeline::{load_prepared, RunConfig};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moebert"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "out_dir": dir.join("run"),
        "data": { "synthetic": { "n_train": 48, "n_eval": 20, "vocab_size": 80, "signal_per_class": 4 } },
        "model": { "embed_dim": 8, "ffn_hidden": 16, "layers": 1, "heads": 2, "max_seq_len": 24, "dropout": 0.1 },
        "moe": { "experts": 2, "shared_dim": 2 },
        "teacher": { "epochs": 2, "batch_size": 16 },
        "distill": { "epochs": 1, "batch_size": 16 },
        "bench": { "seq_len": 8, "repeats": 1, "warmup": 0, "examples": 2 }
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"));
    v["error"].clone()
}

#[test]
fn pipeline_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["pipeline", "--config", cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(summary["student_eval_acc"].as_f64().is_some());
    }
    for name in ["teacher_metrics.jsonl", "student_metrics.jsonl", "importance.json", "student.ckpt"] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert!(!x.is_empty(), "{name} is empty");
        assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn adapt_without_importance_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["train-teacher", "--config", cfg]).status.success());
    let o = run(&["adapt", "--config", cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_error(&o);
    assert_eq!(err["kind"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("importance.json"));
}

#[test]
fn eval_accuracy_matches_a_manual_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let cfg_str = cfg_path.to_str().unwrap();
    for stage in ["train-teacher", "importance", "adapt", "distill"] {
        let o = run(&[stage, "--config", cfg_str]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run(&["eval", "--config", cfg_str]);
    assert!(o.status.success());
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();

    let cfg = RunConfig::load(&cfg_path).unwrap();
    let data = load_prepared(&cfg).unwrap();
    let (model, _) = load_checkpoint(&cfg.out_dir.join("student.ckpt")).unwrap();
    let mut correct = 0;
    for ex in &data.eval.examples {
        let batch = moebert::data::make_batch(&[ex]);
        let logits = model.logits(&batch).unwrap();
        let row = logits.data();
        let argmax = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        correct += usize::from(argmax == ex.label);
    }
    assert_eq!(report["examples"], data.eval.examples.len());
    assert_eq!(report["correct"], correct);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((acc - correct as f64 / data.eval.examples.len() as f64).abs() < 1e-12);
    assert!(cfg.out_dir.join("eval.json").is_file());
}

#[test]
fn eval_of_teacher_checkpoint_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["train-teacher", "--config", cfg]).status.success());
    let o = run(&["eval", "--config", cfg, "--checkpoint", "teacher.ckpt"]);
    assert!(o.status.success());
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["checkpoint"], "teacher.ckpt");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["pipeline", "--config", "x.json", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["kind"], "usage");
}

#[test]
fn bad_enum_value_is_a_usage_error() {
    let o = run(&["adapt", "--config", "x.json", "--routing", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["kind"], "usage");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&["train-teacher", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_error(&o);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn invalid_override_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(&["adapt", "--config", cfg.to_str().unwrap(), "--experts", "4", "--shared-dim", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["kind"], "config");
    assert!(!dir.path().join("run").join("student_init.ckpt").exists());
}

#[test]
fn help_succeeds() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("pipeline"));
}
