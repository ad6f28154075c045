use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn sdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdg")).args(args).output().expect("sdg binary runs")
}

fn run_json(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn micro_pipeline_runs_quickly_and_records_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = sdg(&["all", "--micro", "--out", out.to_str().unwrap()]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(elapsed < 30.0, "micro run took {elapsed:.1} s");
    let run = run_json(&out);
    assert_eq!(run["status"], "ok");
    assert_eq!(run["micro"], true);
    let names: Vec<&str> = run["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["generate", "pseudo-real", "train", "experiment"]);
    assert_eq!(run["stages"][0]["detail"]["images"], 20);
    for f in ["synthetic/manifest.jsonl", "synthetic/summary.json", "pseudo_real/manifest.jsonl", "model/sdg.bin", "model/training.json",
              "experiment/experiment.json", "experiment/grid_sdg.csv", "experiment/grid_fs_real.csv", "experiment/grid_difference.csv",
              "experiment/zero_shot.json"]
    {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    // Classification against an explicit predictions file: everything called "pass".
    let manifest = out.join("pseudo_real/manifest.jsonl");
    let ids: Vec<u64> = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["plan_id"].as_u64().unwrap())
        .collect();
    let preds: String = ids.iter().map(|id| format!("{id} pass 0.9\n")).collect();
    let pred_path = dir.path().join("preds.txt");
    fs::write(&pred_path, preds).unwrap();
    let o = sdg(&["eval-classify", "--micro", "--out", out.to_str().unwrap(), "--predictions", pred_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("eval/classification.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["balanced_accuracy"], 0.5);
    assert_eq!(report["confusion"]["tp_pass"], 8);

    // Same with the trained model, which also writes its own predictions.
    let o = sdg(&["eval-classify", "--micro", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("eval/predictions.txt")).unwrap().lines().count(), 12);
}

#[test]
fn micro_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(sdg(&["generate", "--micro", "--workers", "1", "--out", a.to_str().unwrap()]).status.success());
    assert!(sdg(&["generate", "--micro", "--workers", "3", "--out", b.to_str().unwrap()]).status.success());
    let read = |p: &Path| fs::read(p.join("synthetic/manifest.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = dir.path().join("c");
    assert!(sdg(&["generate", "--micro", "--seed", "5", "--out", c.to_str().unwrap()]).status.success());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let o = sdg(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = sdg(&["generate", "--config", "/nonexistent/run.toml", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn schema_and_parse_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = sdg_core::config::DEFAULT_CONFIG_TOML.replace("schema_version = 1", "schema_version = 2");
    let o = sdg(&["generate", "--config", &write_config(dir.path(), &text)]);
    assert_eq!(o.status.code(), Some(4));
    let text = sdg_core::config::DEFAULT_CONFIG_TOML.replace("[train]", "[train]\nmomentum = 0.9");
    let o = sdg(&["generate", "--config", &write_config(dir.path(), &text)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));
}

#[test]
fn invalid_values_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let text = sdg_core::config::DEFAULT_CONFIG_TOML.replace("val_fraction = 0.1", "val_fraction = 1.5");
    assert_ne!(text, sdg_core::config::DEFAULT_CONFIG_TOML);
    let o = sdg(&["generate", "--config", &write_config(dir.path(), &text)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("val_fraction"));
}

#[test]
fn stage_without_inputs_fails_and_records_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = sdg(&["train", "--micro", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(7));
    let run = run_json(&out);
    assert_eq!(run["status"], "failed");
    assert_eq!(run["exit_code"], 7);
    assert!(run["error"].as_str().unwrap().contains("manifest.jsonl"));
}
