//! Black-box tests of the `accvit` binary: exit codes, JSON shape, and golden
//! `describe` output. Set `UPDATE_GOLDEN=1` to rewrite the golden files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accvit::tensor::{io, Tensor};
use serde_json::Value;

fn accvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accvit")).args(args).env("ACCVIT_THREADS", "1").output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not one JSON document ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

fn images(dir: &Path, name: &str, dims: &[usize], offset: usize) -> PathBuf {
    let t = Tensor::<f32>::from_fn(dims, |i| (((i + offset) * 7919) % 1000) as f32 / 500.0 - 1.0).unwrap();
    let path = dir.join(name);
    io::save(&path, &t).unwrap();
    path
}

#[test]
fn describe_matches_golden_files() {
    for variant in ["femto", "pico", "nano", "tiny", "small", "base"] {
        let out = accvit(&["describe", "--variant", variant]);
        assert_eq!(out.status.code(), Some(0), "{variant}");
        let path = golden_dir().join(format!("describe_{variant}.json"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &out.stdout).unwrap();
        }
        let golden = std::fs::read(&path).unwrap_or_else(|_| panic!("missing {}; run with UPDATE_GOLDEN=1", path.display()));
        assert_eq!(String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&golden), "{variant}");
    }
}

#[test]
fn describe_reports_table_targets() {
    let doc = json(&accvit(&["describe", "--variant", "tiny", "--json"]));
    assert_eq!(doc["summary"]["targets"]["params_m"], 28.367);
    assert_eq!(doc["summary"]["targets"]["flops_g"], 5.694);
    assert_eq!(doc["stages"].as_array().unwrap().len(), 4);
    let doc = json(&accvit(&["describe", "--variant", "femto"]));
    assert_eq!(doc["summary"]["targets"]["params_m"], 4.4);
    assert_eq!(doc["summary"]["targets"]["flops_g"], 1.049);
    let dev = doc["summary"]["params_deviation_pct"].as_f64().unwrap();
    assert!(dev.abs() <= 15.0);
}

#[test]
fn usage_errors_exit_2() {
    let out = accvit(&["describe", "--variant", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert!(out.stdout.is_empty());
    assert_eq!(accvit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(accvit(&["describe"]).status.code(), Some(2));
    assert_eq!(accvit(&["gradcheck", "--component", "nope"]).status.code(), Some(2));
    assert_eq!(accvit(&["bench", "--variant", "micro", "--stage", "9", "--resolution", "64"]).status.code(), Some(2));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_accvit"))
        .args(["describe", "--variant", "femto"])
        .env("ACCVIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
}

#[test]
fn gradcheck_gate_passes() {
    let out = accvit(&["gradcheck", "--component", "gate", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json(&out);
    assert_eq!(doc["passed"], true);
    assert!(doc["max_rel_err"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn forward_is_deterministic_and_batch_splittable() {
    let dir = tempfile::tempdir().unwrap();
    let both = images(dir.path(), "both.tsr", &[2, 3, 64, 64], 0);
    let per = 3 * 64 * 64;
    let first = images(dir.path(), "first.tsr", &[1, 3, 64, 64], 0);
    let second = images(dir.path(), "second.tsr", &[1, 3, 64, 64], per);
    let run = |input: &Path| {
        let out = accvit(&["forward", "--variant", "micro", "--input", input.to_str().unwrap(), "--num-classes", "10", "--seed", "3"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        json(&out)
    };
    let a = run(&both);
    let b = run(&both);
    assert_eq!(a["sha256"], b["sha256"]);
    assert_eq!(a["logits_dims"], serde_json::json!([2, 10]));

    // Concatenating the logits of two single-image runs gives the same bytes.
    run(&first);
    run(&second);
    let read = |p: PathBuf| -> Tensor<f32> { io::load(p).unwrap().into_precision() };
    let l1 = read(first.with_extension("logits.tsr"));
    let l2 = read(second.with_extension("logits.tsr"));
    let joined = Tensor::new(&[2, 10], [l1.data(), l2.data()].concat()).unwrap();
    assert_eq!(accvit::cli::logits_digest(&joined), a["sha256"].as_str().unwrap());
}

#[test]
fn forward_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let four = images(dir.path(), "four.tsr", &[1, 4, 64, 64], 0);
    let out = accvit(&["forward", "--variant", "micro", "--input", four.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let junk = dir.path().join("junk.tsr");
    std::fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(accvit(&["forward", "--variant", "micro", "--input", junk.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.tsr");
    assert_eq!(accvit(&["forward", "--variant", "micro", "--input", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bench_stage_one_has_four_branches() {
    let out = accvit(&["bench", "--stage", "1", "--resolution", "224", "--repeats", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json(&out);
    let rates: Vec<u64> = doc["branches"].as_array().unwrap().iter().map(|b| b["rate"].as_u64().unwrap()).collect();
    assert_eq!(rates, vec![1, 2, 4, 8]);
    assert!(doc["attention_layer"]["macs"].as_u64().unwrap() > 0);
}

const SMALL_TRAIN: &str = r#"{
    "variant": "micro2",
    "data": { "seed": 0, "n_samples": 16, "image_size": 16, "noise": 0.1 },
    "epochs": 2,
    "batch_size": 8
}"#;

#[test]
fn train_toy_streams_epochs_then_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let run_dir = dir.path().join("run");
    let out = accvit(&["train-toy", "--config", cfg.to_str().unwrap(), "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["epoch"], 1);
    assert_eq!(lines[2]["final"]["epochs"], 2);
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(run_dir.join("report.json").exists() && run_dir.join("config.json").exists());

    // --json: one document holding the whole report.
    let out = accvit(&["--json", "train-toy", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json(&out);
    assert_eq!(doc["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(doc["epochs"][0], lines[0]);
}

#[test]
fn train_toy_config_errors_and_missed_target() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"epochs": 2, "learning_rate": 1}"#).unwrap();
    assert_eq!(accvit(&["train-toy", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let unreachable = dir.path().join("target.json");
    let cfg = SMALL_TRAIN.replacen("\"epochs\": 2", "\"epochs\": 1, \"lr\": 0.0, \"target_accuracy\": 0.99", 1);
    std::fs::write(&unreachable, cfg).unwrap();
    assert_eq!(accvit(&["train-toy", "--config", unreachable.to_str().unwrap()]).status.code(), Some(1));
}
