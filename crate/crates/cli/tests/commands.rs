use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use sdmcl::data_io::{write_embeddings, LabeledDataset};
use sdmcl::numerics::{DenseMatrix, Rng};

fn sdmcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdmcl"))
        .args(args)
        .env_remove("SDMCL_DETERMINISTIC")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Four well-separated classes in 8 dimensions.
fn write_toy_data(dir: &Path) {
    let mut rng = Rng::new(9);
    for (name, count) in [("train.emb", 80), ("valid.emb", 40)] {
        let labels: Vec<usize> = (0..count).map(|i| i % 4).collect();
        let features = DenseMatrix::<f32>::from_fn(count, 8, |i, j| {
            let hot = if j == 2 * labels[i] || j == 2 * labels[i] + 1 {
                1.0
            } else {
                0.0
            };
            hot + 0.05 * rng.uniform() as f32
        });
        let ds = LabeledDataset::new(features, labels, 4, "toy").unwrap();
        write_embeddings(&ds, &dir.join(name)).unwrap();
    }
}

fn write_config(dir: &Path, model: &str) -> std::path::PathBuf {
    let body = format!(
        r#"{{
  "model": {model},
  "optimizer": {{"kind": "sgd", "learning_rate": 0.5}},
  "data": {{"format": "embeddings", "train": "train.emb", "valid": "valid.emb"}},
  "tasks": {{"classes_per_task": 2, "epochs_per_task": 3, "batch_size": 8}},
  "output_dir": "out"
}}"#
    );
    let path = dir.join("run.json");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn missing_config_exits_with_config_code() {
    let out = sdmcl(&["continual", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_data(dir.path());
    let path = write_config(dir.path(), r#"{"kind": "mlp", "neurons": 16, "colour": "red"}"#);
    assert_eq!(sdmcl(&["continual", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn seed_override_writes_one_result_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_data(dir.path());
    let path = write_config(dir.path(), r#"{"kind": "mlp", "neurons": 16}"#);
    let out = sdmcl(&["continual", path.to_str().unwrap(), "--seed", "1,2,3", "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = dir.path().join("out");
    for seed in 1..=3 {
        assert!(results.join(format!("relu-sgd-seed{seed}.jsonl")).exists());
        assert!(results.join(format!("relu-sgd-seed{seed}.summary.json")).exists());
    }
    let summaries = std::fs::read_dir(&results)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".summary.json")
        })
        .count();
    assert_eq!(summaries, 3);
    assert!(results.join("summary.json").exists());
    let echoed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(echoed["tasks"]["seeds"], serde_json::json!([1, 2, 3]));
    assert!(results.join("config.resolved.json").exists());
}

#[test]
fn oracle_flag_runs_a_single_task() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_data(dir.path());
    let path = write_config(dir.path(), r#"{"kind": "mlp", "neurons": 16}"#);
    let out = sdmcl(&["continual", path.to_str().unwrap(), "--oracle"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("seed0.jsonl"))
        .unwrap();
    let text = std::fs::read_to_string(summary).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["task"], 0);
    assert_eq!(last["per_task_accuracy"].as_array().unwrap().len(), 1);
}

#[test]
fn sdmlp_pretrain_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_data(dir.path());
    let model =
        r#"{"kind": "sdmlp", "neurons": 16, "topk": {"k_target": 2, "k_max": 16, "s": 2, "mode": "anneal_subtract"}}"#;
    let path = write_config(dir.path(), model);
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg["pretrain"] = serde_json::json!({"epochs": 2});
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = sdmcl(&["pretrain", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(dir.path().join("out/pretrained-seed0.sdmlp")).unwrap();
    assert!(bytes.starts_with(b"SDMLP1\n"));
}

#[test]
fn sgd_probe_is_silent_between_injections() {
    let out = sdmcl(&["probe", "--optimizer", "sgd"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,optimizer,delta,m,v"));
    let mut quiet = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let delta: f64 = f[2].parse().unwrap();
        assert!(delta == 0.0 || (delta - 0.2).abs() < 1e-12, "{line}");
        quiet += (delta == 0.0) as usize;
    }
    assert!(quiet > 50);
}

#[test]
fn empty_schedule_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    std::fs::write(&path, r#"{"injections": [], "total_steps": 0}"#).unwrap();
    let out = sdmcl(&["probe", "--schedule", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "step,optimizer,delta,m,v\n");
}

#[test]
fn malformed_schedule_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"injections": [[3, 0.1], [1, 0.1]], "total_steps": 10}"#).unwrap();
    assert_eq!(
        sdmcl(&["probe", "--schedule", path.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn rmsprop_spikes_hardest_on_reinjection() {
    let out = sdmcl(&["probe"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let peak = |name: &str| {
        text.lines()
            .skip(1)
            .filter(|l| l.split(',').nth(1) == Some(name))
            .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap().abs())
            .fold(0.0, f64::max)
    };
    assert!(peak("rmsprop") > peak("adam"));
    assert!(peak("adam") > peak("sgdm"));
}

#[test]
fn raw_intersection_count_for_tiny_space() {
    let out = sdmcl(&["sdm-analyze", "--n", "4", "--d", "1", "--raw"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "0");
    assert_eq!(row[1].parse::<f64>().unwrap(), 5.0);
}

#[test]
fn normalized_curves_start_at_one_and_run_fast() {
    let start = Instant::now();
    let out = sdmcl(&["sdm-analyze", "--n", "64", "--d", "11"]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 65);
    let first: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(&first[1..], &[1.0, 1.0, 1.0]);
}

#[test]
fn ode_reports_active_counts() {
    let out = sdmcl(&[
        "gaba-ode",
        "--n",
        "20",
        "--excitatory",
        "50",
        "--inhibitory",
        "5",
        "--inputs",
        "3",
        "--b-i",
        "1,3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("b_i,input,active,steps,converged\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn report_merges_summaries() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_data(dir.path());
    let path = write_config(dir.path(), r#"{"kind": "mlp", "neurons": 8}"#);
    assert!(sdmcl(&["continual", path.to_str().unwrap(), "--seed", "4,5"])
        .status
        .success());
    let out = sdmcl(&["report", dir.path().join("out").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("relu")).count(), 1);
}
