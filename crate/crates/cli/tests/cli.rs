use std::path::Path;
use std::process::{Command, Output};

fn apfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apfl")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{
  "dataset": { "kind": "synthetic", "num_classes": 4, "input_dim": 8, "samples": 400 },
  "partition": { "num_clients": 3, "alpha": 0.5 },
  "d_p": 32,
  "d_r": 16,
  "seed": 7
}"#,
    )
    .unwrap();
    path
}

#[test]
fn verify_exit_codes() {
    let ok = apfl(&["verify", "--seed", "3"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let bad = apfl(&["verify", "--seed", "3", "--inject-fault"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("seed"));
}

#[test]
fn run_writes_reports_for_both_transports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut reports = Vec::new();
    for transport in ["simulated", "socket"] {
        let out = dir.path().join(transport);
        let o = apfl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--transport", transport]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("accuracy.csv").exists());
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        reports.push(report);
    }
    assert_eq!(reports[0]["mean_accuracy"], reports[1]["mean_accuracy"]);
}

#[test]
fn synth_then_partition() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = apfl(&["synth", "--classes", "3", "--dim", "4", "--samples", "300", "--out-dir", d]);
    assert!(o.status.success());
    let manifest = dir.path().join("parts.json");
    let args = [
        "partition",
        "--features",
        &format!("{d}/features.bin"),
        "--labels",
        &format!("{d}/labels.bin"),
        "--clients",
        "4",
        "--alpha",
        "0.3",
        "--out",
        manifest.to_str().unwrap(),
    ];
    assert!(apfl(&args).status.success());
    let first = std::fs::read(&manifest).unwrap();
    let o = apfl(&args);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean entropy"));
    assert_eq!(first, std::fs::read(&manifest).unwrap());
}

#[test]
fn sweep_rejects_unknown_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = apfl(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "momentum", "--values", "1"]);
    assert!(!o.status.success());
}
