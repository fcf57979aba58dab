use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "dataset": {"num_classes": 4, "train_size": 600, "test_size": 200, "rho": [0.9],
              "intrinsic_dim": 6, "bias_dim": 4},
  "scoring": {"epochs": 3, "batch_size": 64, "hidden_layers": [16]},
  "stage2": {"epochs": 3, "batch_size": 64, "hidden_layers": [16],
             "label_source": {"kind": "pseudo", "tau": 0.5}}
}"#;

fn gradalign(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradalign"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GRADALIGN_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn default_config_prints_the_binary_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = gradalign(&["default-config", "--classes", "2"], dir.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["scoring"]["eta"], 0.9);
    assert_eq!(v["dataset"]["num_classes"], 2);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"stage2": {"gama": 1.0}}"#).unwrap();
    let o = gradalign(&["run", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gama"));

    let o = gradalign(&["run", "--set", "stage2.gamma=-1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = gradalign(&["evaluate", "--model", "nope.bin", "--test", "nope.dataset"], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn run_writes_artifacts_under_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_gradalign"))
        .args(["run", "--config", &cfg, "--set", "output_dir=exp"])
        .current_dir(dir.path())
        .env("GRADALIGN_OUTPUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("unbiased accuracy"));
    let out = dir.path().join("root/exp");
    for f in ["train.dataset", "scores.csv", "pseudo_labels.csv", "trace.csv", "model.bin", "report.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 8);
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = dir.path();

    let o = gradalign(&["gen-data", "--config", &cfg, "--out", "data"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("600 train / 200 test"));

    let o = gradalign(&["score", "--config", &cfg, "--train", "data/train.dataset", "--out", "scored"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["average_precision"].as_f64().unwrap() > 0.0);

    // Mined labels without scores is a usage error.
    let o = gradalign(
        &["train", "--config", &cfg, "--train", "data/train.dataset", "--test", "data/test.dataset", "--out", "model"],
        d,
    );
    assert_eq!(o.status.code(), Some(2));

    let o = gradalign(
        &[
            "train", "--config", &cfg, "--train", "data/train.dataset", "--test", "data/test.dataset",
            "--scores", "scored/scores.csv", "--out", "model",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = gradalign(
        &[
            "evaluate", "--model", "model/model.bin", "--test", "data/test.dataset",
            "--epochs", "model/epochs.jsonl", "--out", "eval.json",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let acc = eval["overall_unbiased_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["last_epoch_acc"].as_f64().unwrap(), acc);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = gradalign(
        &["sweep", "--config", &cfg, "--set", "output_dir=sw", "--param", "gamma", "--values", "1,2", "--jobs", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sw/sweep_gamma.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("value,status,average_precision"));

    let o = gradalign(&["sweep", "--config", &cfg, "--param", "gamma", "--values", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
