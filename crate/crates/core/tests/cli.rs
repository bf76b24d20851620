mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::crate_dir;
use enkmp::cli::RunManifest;
use enkmp::mlp::{Activation, MlpModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn enkmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enkmp"))
        .args(args)
        .env_remove("ENKMP_OUT")
        .output()
        .unwrap()
}

fn smoke(steps: usize) -> Value {
    let text = std::fs::read_to_string(crate_dir().join("configs/smoke.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["steps"] = json!(steps);
    v["planner"]["smoother"]["n_members"] = json!(30);
    v["planner"]["horizon"] = json!(10);
    v
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn data_rows(csv: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# enkmp"), "schema line");
    lines.next().expect("header");
    lines.map(str::to_owned).collect()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_field_is_a_config_error_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = smoke(1);
    v.as_object_mut().unwrap().remove("target_speed");
    let cfg = write_json(tmp.path(), "bad.json", &v);
    let out = enkmp(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("target_speed"), "{}", stderr(&out));

    let train = write_json(tmp.path(), "train.json", &json!({"n_trajectories": 1}));
    let out = enkmp(&["train", "--config", train.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing field"), "{}", stderr(&out));
}

#[test]
fn unreadable_config_is_a_config_error() {
    let out = enkmp(&["run", "--config", "/nonexistent/enkmp.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_training_run_writes_model_loss_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(crate_dir().join("configs/train.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["n_trajectories"] = json!(1);
    v["steps_per_trajectory"] = json!(10);
    v["epochs"] = json!(1);
    v["hidden"] = json!([8]);
    v.as_object_mut().unwrap().remove("rmse_threshold");
    let cfg = write_json(tmp.path(), "train.json", &v);
    let out_dir = tmp.path().join("out");
    let out = enkmp(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    MlpModel::load(out_dir.join("model.json")).unwrap();
    assert_eq!(data_rows(&out_dir.join("loss.csv")).len(), 1);
    let m = manifest(&out_dir);
    assert_eq!(m.command, "train");
    assert!(m.model_sha256.is_some());
}

#[test]
fn single_step_run_writes_one_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "smoke.json", &smoke(1));
    let out_dir = tmp.path().join("out");
    let out = enkmp(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(data_rows(&out_dir.join("records.csv")).len(), 1);
    assert_eq!(data_rows(&out_dir.join("timings.csv")).len(), 1);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_completed"], json!(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("total cost"));
}

#[test]
fn fixed_seed_reproduces_record_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "smoke.json", &smoke(12));
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = enkmp(&["run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(manifest(&dir).seed, Some(7));
        std::fs::read(dir.join("records.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn config_hash_ignores_formatting_and_key_order() {
    let tmp = tempfile::tempdir().unwrap();
    let v = smoke(1);
    let pretty = write_json(tmp.path(), "pretty.json", &v);
    // serde_json's map keeps keys sorted, so reversing them needs a manual writer
    let obj = v.as_object().unwrap();
    let reversed: Vec<String> = obj
        .iter()
        .rev()
        .map(|(k, val)| format!("{}:{}", serde_json::to_string(k).unwrap(), val))
        .collect();
    let compact = tmp.path().join("compact.json");
    std::fs::write(&compact, format!("{{{}}}", reversed.join(","))).unwrap();
    let hash = |cfg: &Path, name: &str| {
        let dir = tmp.path().join(name);
        let out = enkmp(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        manifest(&dir).config_sha256
    };
    assert_eq!(hash(&pretty, "a"), hash(&compact, "b"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "smoke.json", &smoke(1));
    let out = Command::new(env!("CARGO_BIN_EXE_enkmp"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("ENKMP_OUT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("root/run/records.csv").exists());
}

#[test]
fn planner_abort_exits_nonzero_and_keeps_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut broken = MlpModel::new_random(&[8], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(0));
    broken.layers.last_mut().unwrap().weights *= 1e308;
    broken.save(tmp.path().join("broken.json")).unwrap();
    let mut v = smoke(5);
    v["planning_model"] = json!({"type": "surrogate", "path": "broken.json"});
    let cfg = write_json(tmp.path(), "broken_run.json", &v);
    let out_dir = tmp.path().join("out");
    let out = enkmp(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("aborted"), "{}", stderr(&out));
    assert!(data_rows(&out_dir.join("records.csv")).len() < 5);
    assert!(out_dir.join("manifest.json").exists());
}

fn sweep_rows(dir: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(dir.join("sweep.csv"))
        .unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

#[test]
fn sweep_single_cell() {
    let tmp = tempfile::tempdir().unwrap();
    write_json(tmp.path(), "smoke.json", &smoke(3));
    let sweep = json!({"scenario": "smoke.json", "methods": ["enks"], "n_members": [20], "horizons": [5], "seeds": [0]});
    let cfg = write_json(tmp.path(), "sweep.json", &sweep);
    let out_dir = tmp.path().join("out");
    let out = enkmp(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = sweep_rows(&out_dir);
    let cells: Vec<_> = rows.iter().filter(|r| r[0] == "cell").collect();
    assert_eq!(cells.len(), 1);
    assert!(out_dir.join("enks_N20_H5_s0/records.csv").exists());
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn sweep_averages_seeds_and_records_failed_cells() {
    let tmp = tempfile::tempdir().unwrap();
    write_json(tmp.path(), "smoke.json", &smoke(3));
    let sweep = json!({
        "scenario": "smoke.json",
        "methods": ["enks"],
        "n_members": [20],
        "horizons": [5, 0],
        "seeds": [1, 2]
    });
    let cfg = write_json(tmp.path(), "sweep.json", &sweep);
    let out_dir = tmp.path().join("out");
    let out = enkmp(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--threads", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = sweep_rows(&out_dir);
    let good: Vec<_> = rows.iter().filter(|r| r[0] == "cell" && r[3] == "5").collect();
    let bad: Vec<_> = rows.iter().filter(|r| r[0] == "cell" && r[3] == "0").collect();
    assert_eq!(good.len(), 2);
    assert_eq!(bad.len(), 2);
    assert!(bad.iter().all(|r| r.last().unwrap().contains("horizon")));
    let mean: Vec<_> = rows.iter().filter(|r| r[0] == "mean").collect();
    assert_eq!(mean.len(), 1);
    assert_eq!(mean[0][5], "2");
    let costs: Vec<f64> = good.iter().map(|r| r[6].parse().unwrap()).collect();
    let avg: f64 = mean[0][6].parse().unwrap();
    assert!((avg - (costs[0] + costs[1]) / 2.0).abs() <= 1e-9 * avg.abs());
    // the group is its own anchor
    assert_eq!(mean[0][11].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn baseline_command_runs_the_penalty_planner() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "smoke.json", &smoke(40));
    let out_dir = tmp.path().join("out");
    let out = enkmp(&["baseline", "--config", cfg.to_str().unwrap(), "--steps", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(data_rows(&out_dir.join("records.csv")).len(), 2);
    assert_eq!(manifest(&out_dir).command, "baseline");
}
