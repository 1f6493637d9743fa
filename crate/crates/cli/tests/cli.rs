use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dermqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dermqa"))
        .args(args)
        .env_remove("DERMQA_SEED")
        .env_remove("DERMQA_WORKERS")
        .env_remove("DERMQA_SPLIT")
        .env_remove("DERMQA_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) -> String {
    let out = dermqa(&["synth", "--out", dir.to_str().unwrap(), "--encounters", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("config.json").display().to_string()
}

#[test]
fn missing_definitions_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    fs::remove_file(dir.path().join("definitions.json")).unwrap();
    let out = dermqa(&["--config", &config, "--mock-backends", "preprocess"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("definitions.json"), "{stderr}");
}

#[test]
fn bad_config_value_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"threshold": 1.5}"#).unwrap();
    let out = dermqa(&["--config", path.to_str().unwrap(), "preprocess"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_against_unreachable_backend_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    for cmd in ["preprocess", "build-kb"] {
        assert!(dermqa(&["--config", &config, "--mock-backends", cmd]).status.success());
    }
    let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    value["mock_backends"] = false.into();
    value["backends"] = serde_json::json!({
        "chat": {"name": "chat", "endpoint": "http://127.0.0.1:9/chat", "retries": 0, "timeout_secs": 1},
        "embedding": {"name": "embedding", "endpoint": "http://127.0.0.1:9/embed", "retries": 0, "timeout_secs": 1},
        "reranker": {"name": "reranker", "endpoint": "http://127.0.0.1:9/rerank", "retries": 0, "timeout_secs": 1},
    });
    fs::write(&config, value.to_string()).unwrap();
    let out = dermqa(&["--config", &config, "run"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_is_reproducible_with_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let commands = ["preprocess", "build-kb", "run", "aggregate", "evaluate", "agreement"];
    let stages = ["preprocess", "kb", "run", "aggregate", "evaluate", "agreement"];
    let mut first = Vec::new();
    for round in 0..2 {
        if round == 1 {
            fs::remove_dir_all(dir.path().join("out")).unwrap();
        }
        let mut manifests = Vec::new();
        for cmd in commands {
            let out = dermqa(&["--config", &config, "--mock-backends", "--workers", "2", cmd]);
            assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        }
        for stage in stages {
            let manifest = dir.path().join("out/valid").join(stage).join("manifest.json");
            manifests.push(fs::read(&manifest).unwrap());
        }
        if round == 0 {
            first = manifests;
        } else {
            assert_eq!(first, manifests);
        }
    }
    let scores = fs::read_to_string(dir.path().join("out/valid/evaluate/scores.csv")).unwrap();
    assert!(scores.starts_with("family,accuracy,n\n"));
    assert_eq!(scores.lines().count(), 11);
}

#[test]
fn seed_flag_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out = dermqa(&["--config", &config, "--mock-backends", "--seed", "7", "preprocess"]);
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/valid/preprocess/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 7);
}
