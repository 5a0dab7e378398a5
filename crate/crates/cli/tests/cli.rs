//! End-to-end runs of the `seqpretext` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqpretext"))
        .args(args)
        .env("SEQPRETEXT_OUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn error(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = run(dir, args);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    (out.status.code().unwrap(), serde_json::from_str(line).unwrap())
}

const TINY: [&str; 14] = [
    "--set", "embedding.d_time=4",
    "--set", "embedding.d_type=4",
    "--set", "encoder.d_model=8",
    "--set", "encoder.d_ff=16",
    "--set", "train.pretext_epochs=2",
    "--set", "train.finetune_epochs=2",
    "--set", "train.lr=0.001",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

fn gen(dir: &Path) {
    let v = ok(
        dir,
        &[
            "gen-data", "--num-types", "3", "--num-seqs", "30", "--horizon", "40", "--seed", "4",
            "--mu", "0.2", "--alpha", "0.1", "--beta", "1.0", "--out", "data.jsonl", "--split", "0.6,0.2,0.2",
        ],
    );
    assert_eq!(v["sequences"], 30);
    for f in ["data.jsonl", "data.train.jsonl", "data.dev.jsonl", "data.test.jsonl"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    let p = |f: &str| dir.join(f).display().to_string();
    let (train, dev, test) = (p("data.train.jsonl"), p("data.dev.jsonl"), p("data.test.jsonl"));

    ok(dir, &with_tiny(&["pretrain", "--data", &train, "--seed", "3"]));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("pretrain.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["config"]["encoder.d_model"], 8);

    let ckpt = p("pretrain.ckpt");
    let v = ok(dir, &with_tiny(&["finetune", "--train", &train, "--dev", &dev, "--task", "tpp", "--init", &ckpt, "--seed", "3"]));
    assert_eq!(v["dev_metric"], "nll");
    let metrics = std::fs::read_to_string(dir.join("finetune.metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,dev_nll\n"));
    assert_eq!(metrics.lines().count(), 3);

    let v = ok(dir, &["evaluate", "--checkpoint", &p("finetune.ckpt"), "--data", &test]);
    assert!(v["metrics"]["nll"].as_f64().unwrap().is_finite());
    let first = std::fs::read(dir.join("eval.csv")).unwrap();
    ok(dir, &["evaluate", "--checkpoint", &p("finetune.ckpt"), "--data", &test]);
    assert_eq!(first, std::fs::read(dir.join("eval.csv")).unwrap());

    let v = ok(dir, &["report", &p("finetune.metrics.csv"), &p("eval.csv")]);
    assert_eq!(v["files"].as_array().unwrap().len(), 3);
    let md = std::fs::read_to_string(dir.join("eval.md")).unwrap();
    assert!(md.starts_with("| task | metric | value |"));
    assert!(std::fs::read_to_string(dir.join("finetune.metrics.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn imputation_and_classification_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "gen-data", "--num-types", "2", "--num-seqs", "24", "--horizon", "40", "--seed", "1", "--mu", "0.2",
            "--alpha", "0.05", "--alpha-alt", "0.6,0.0,0.0,0.6", "--out", "lab.jsonl", "--split", "0.5,0.25,0.25",
        ],
    );
    let p = |f: &str| dir.join(f).display().to_string();
    let (train, dev) = (p("lab.train.jsonl"), p("lab.dev.jsonl"));
    let v = ok(dir, &with_tiny(&["finetune", "--train", &train, "--dev", &dev, "--task", "classify", "--name", "cls"]));
    assert_eq!(v["dev_metric"], "auc");
    let v = ok(
        dir,
        &with_tiny(&["finetune", "--train", &train, "--dev", &dev, "--task", "impute", "--name", "imp", "--set", "impute.eval_ratios=[0.2,0.5]"]),
    );
    assert_eq!(v["dev_metric"], "accuracy");
    ok(dir, &["evaluate", "--checkpoint", &p("imp.ckpt"), "--data", &dev, "--name", "imp_eval"]);
    let table = std::fs::read_to_string(dir.join("imp_eval.impute.csv")).unwrap();
    assert!(table.starts_with("ratio,accuracy,rmse,count\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn ablation_grid_over_two_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    let p = |f: &str| dir.join(f).display().to_string();
    let (train, dev) = (p("data.train.jsonl"), p("data.dev.jsonl"));
    let mut args = with_tiny(&["ablate", "--train", &train, "--dev", &dev, "--seeds", "2"]);
    args.extend(["--set", "train.pretext_epochs=1", "--set", "train.finetune_epochs=1"]);
    let v = ok(dir, &args);
    assert_eq!(v["variants"], 8);
    let per_seed = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 1 + 16);
    let summary = std::fs::read_to_string(dir.join("ablation.median.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    assert!(summary.contains("rec+cl+align,nll,"));
}

#[test]
fn failures_emit_one_json_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (code, v) = error(
        dir,
        &["gen-data", "--num-types", "2", "--num-seqs", "3", "--horizon", "10", "--alpha", "1.5", "--beta", "1", "--out", "x.jsonl"],
    );
    assert_eq!(code, 1);
    assert_eq!(v["error"]["kind"], "non_stationary");

    std::fs::write(dir.join("bad.jsonl"), "{\"num_types\": 2}\n{\"seq\": [[2.0, 0], [1.0, 1]]}\n").unwrap();
    let bad = dir.join("bad.jsonl").display().to_string();
    let (_, v) = error(dir, &["pretrain", "--data", &bad]);
    assert_eq!(v["error"]["kind"], "non_increasing_times");
    assert!(v["error"]["message"].as_str().unwrap().contains("line 2"));

    let (_, v) = error(dir, &["pretrain", "--data", &bad, "--set", "nope.key=1"]);
    assert_eq!(v["error"]["kind"], "invalid_config");

    let (code, v) = error(dir, &["pretrain"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"]["kind"], "usage");

    let (_, v) = error(dir, &["evaluate", "--checkpoint", "missing.ckpt", "--data", &bad]);
    assert_eq!(v["error"]["kind"], "io");
}
