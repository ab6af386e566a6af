//! End-to-end runs of the `protoparts` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const DATA: &str = "train_set:\n  name: synthetic_shapes\n  params: {n: 24, num_classes: 3}\ntest_set:\n  name: synthetic_shapes\n  params: {n: 6, num_classes: 3, seed: 8}\n";
const TRAINING: &str = "num_epochs: 2\ncheckpoint_every: 1\n";
const VIZ: &str = "attribution: {type: prp}\nbenchmark: {top_k: 1, kinds: [gaussian_noise, brightness]}\n";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/legacy").join(name)
}

/// Exit code and parsed stdout line.
fn run(args: &[&str]) -> (i32, Option<Value>) {
    let out = Command::new(env!("CARGO_BIN_EXE_protoparts"))
        .args(args)
        .env_remove("PROTOPARTS_OUT")
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let json = stdout.lines().last().and_then(|l| serde_json::from_str(l).ok());
    (out.status.code().unwrap_or(-1), json)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["--version"]).0, 0);
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["explain", "--checkpoint", "c", "--viz", "v"]).0, 1);
}

#[test]
fn import_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("imported");
    let (code, json) = run(&[
        "import",
        "--path",
        &s(&fixture("prototree_tiny_depth3.safetensors")),
        "--format",
        "legacy_prototree",
        "--out",
        &s(&ck),
    ]);
    assert_eq!(code, 0);
    let json = json.unwrap();
    assert_eq!(json["command"], "import");
    assert_eq!(json["num_prototypes"], 7);
    let loaded = protoparts::persistence::Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.model.num_prototypes(), 7);

    let data = write(dir.path(), "data.yml", DATA);
    let (code, json) = run(&["evaluate", "--checkpoint", &s(&ck), "--data", &data]);
    assert_eq!(code, 0);
    let json = json.unwrap();
    assert_eq!(json["split"], "test");
    assert_eq!(json["num_images"], 6);
    let acc = json["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn user_errors_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");

    let (code, _) = run(&["import", "--path", &s(&fixture("protopnet_tiny.safetensors")), "--format", "legacy_protopool", "--out", &s(&out)]);
    assert_eq!(code, 1);
    let (code, _) = run(&["import", "--path", &s(&dir.path().join("missing.safetensors")), "--format", "legacy_protopnet", "--out", &s(&out)]);
    assert_eq!(code, 1);

    let model = write(dir.path(), "model.yml", "prototype_dim: 0\n");
    let data = write(dir.path(), "data.yml", DATA);
    let training = write(dir.path(), "training.yml", TRAINING);
    let viz = write(dir.path(), "viz.yml", VIZ);
    let (code, _) = run(&["train", "--model", &model, "--data", &data, "--training", &training, "--viz", &viz, "--out", &s(&out)]);
    assert_eq!(code, 1);

    let model = write(dir.path(), "model.yml", "");
    let (code, _) = run(&["train", "--model", &model, "--data", &data, "--training", &training, "--viz", &viz]);
    assert_eq!(code, 1, "no --out and no output root");
    assert!(!out.exists());
}

#[test]
fn train_explain_benchmark_edit() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let model = write(p, "model.yml", "");
    let data = write(p, "data.yml", DATA);
    let training = write(p, "training.yml", TRAINING);
    let viz = write(p, "viz.yml", VIZ);
    let run_dir = p.join("run");

    let (code, json) = run(&["train", "--model", &model, "--data", &data, "--training", &training, "--viz", &viz, "--out", &s(&run_dir), "--seed", "3"]);
    assert_eq!(code, 0);
    let json = json.unwrap();
    assert_eq!(json["epochs"], 2);
    let ck = json["final"].as_str().unwrap().to_string();
    assert!(run_dir.join("history.csv").exists());
    assert!(run_dir.join("checkpoints/epoch_1").exists());

    let (code, json) = run(&["explain", "--checkpoint", &ck, "--viz", &viz, "--global", "--out", &s(&p.join("global"))]);
    assert_eq!(code, 0);
    let json = json.unwrap();
    assert_eq!(json["mode"], "global");
    assert!(!json["renders"].as_array().unwrap().is_empty());
    for path in json["paths"].as_array().unwrap() {
        assert!(Path::new(path.as_str().unwrap()).exists());
    }

    let image = p.join("query.png");
    let item = protoparts::data::synth_shapes(1, 3, 32, 99).items.remove(0);
    protoparts::data::write_png(&image, &item.image).unwrap();
    let (code, json) = run(&["explain", "--checkpoint", &ck, "--viz", &viz, "--image", &s(&image), "--top-k", "2", "--out", &s(&p.join("local"))]);
    assert_eq!(code, 0);
    assert_eq!(json.unwrap()["renders"].as_array().unwrap().len(), 2);

    for metric in ["pointing_game", "perturbation"] {
        let out = p.join(metric);
        let (code, json) = run(&["benchmark", "--checkpoint", &ck, "--data", &data, "--viz", &viz, "--metric", metric, "--out", &s(&out)]);
        assert_eq!(code, 0, "{metric}");
        assert!(json.unwrap()["rows"].as_u64().unwrap() > 0);
        assert!(out.join("results.csv").exists() && out.join("summary.json").exists());
    }

    let (code, json) = run(&["project", "--checkpoint", &ck, "--data", &data, "--out", &s(&p.join("projected"))]);
    assert_eq!(code, 0);
    assert_eq!(json.unwrap()["command"], "project");
    let (code, json) = run(&["prune", "--checkpoint", &s(&p.join("projected")), "--data", &data, "--out", &s(&p.join("pruned"))]);
    assert_eq!(code, 0);
    assert!(json.unwrap()["active_prototypes"].as_u64().unwrap() > 0);
}
