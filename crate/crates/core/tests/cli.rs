// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line contract: outputs, exit codes, determinism.

use std::fs;
use std::path::Path;

use attn_sae::interface::{execute, run_cli, Cli, CliError};
use attn_sae::metrics::DashboardRecord;
use attn_sae::model::{build_induction_model, save_weights, Site};
use attn_sae::sae::{save_sae, SaeParams};
use clap::Parser;
use serde_json::{json, Value};

fn run(args: &[&str]) -> Result<(), CliError> {
    let mut full = vec!["attn-sae"];
    full.extend_from_slice(args);
    execute(&Cli::try_parse_from(full).expect("arguments parse"))
}

fn write(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn read(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const FIXTURE: &str = r#"{ "kind": "induction_fixture", "vocab": 26, "max_seq": 16, "sharpness": 10.0 }"#;

fn small_train_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("train.json");
    write(
        &p,
        &json!({
            "model": serde_json::from_str::<Value>(FIXTURE).unwrap(),
            "site": "blocks.1.attn.hook_z",
            "data": { "kind": "random_repeated", "n": 1500, "seq_len": 16, "seed": 1 },
            "eval_data": { "kind": "random_repeated", "n": 40, "seq_len": 16, "seed": 2 },
            "buffer_capacity": 4096,
            "train": { "batch": 128, "total_steps": 150, "resample_every": 50, "resample_until": 100,
                       "dead_window": 4000, "resample_pool": 1024, "seed": 3 }
        }),
    );
    p
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]).unwrap();
    }
    for f in ["sae.json", "sae.bin", "report.json", "stats.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(a.join("sae.bin")).unwrap(), fs::read(b.join("sae.bin")).unwrap());
    let report = read(&a.join("report.json"));
    assert_eq!(report["schema_version"], 1);
    assert!(report["loss_recovered"].is_number());

    let c = dir.path().join("c");
    run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out-dir", c.to_str().unwrap()]).unwrap();
    assert_ne!(fs::read(a.join("sae.bin")).unwrap(), fs::read(c.join("sae.bin")).unwrap());
    assert_eq!(read(&c.join("stats.json"))["seed"], 4);
}

#[test]
fn missing_weights_exit_two_naming_path() {
    let e = run(&["eval", "--model", "/no/such/weights.json", "--sae", "/no/sae.json"]).unwrap_err();
    assert_eq!(e.code, 2);
    assert!(e.message.contains("/no/such/weights.json"), "{}", e.message);
    assert_eq!(run_cli(["attn-sae", "eval", "--model", "/no/such/weights.json"]), 2);
}

#[test]
fn unknown_experiment_lists_names() {
    let e = run(&["experiment", "nonsense"]).unwrap_err();
    assert_eq!(e.code, 2);
    for name in ["prefix_sweep", "head_sweep", "induction_family", "proxy_report"] {
        assert!(e.message.contains(name), "{}", e.message);
    }
    assert_eq!(run_cli(["attn-sae", "experiment", "nonsense"]), 2);
    assert_eq!(run_cli(["attn-sae", "no-such-subcommand"]), 2);
}

#[test]
fn prefix_sweep_has_one_score_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    write(
        &cfg,
        &json!({
            "model": serde_json::from_str::<Value>(FIXTURE).unwrap(),
            "experiment": { "prefix_lens": [1, 3, 5], "n": 10, "seq_len": 16 }
        }),
    );
    let out = dir.path().join("out");
    run(&["experiment", "prefix_sweep", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .unwrap();
    let doc = read(&out.join("prefix_sweep.json"));
    assert_eq!(doc["schema_version"], 1);
    assert!(doc["config_hash"].as_str().unwrap().len() == 64);
    let pts = doc["result"]["points"].as_array().unwrap();
    assert_eq!(pts.iter().map(|p| p["prefix_len"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 3, 5]);
    assert!(out.join("prefix_sweep.csv").exists());
}

#[test]
fn dashboards_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let w = build_induction_model(26, 16, 10.0).unwrap();
    let model = dir.path().join("model.json");
    save_weights(&w, &model).unwrap();
    let sae_path = dir.path().join("sae.json");
    save_sae(&SaeParams::init(4 * w.config.d_head, 24, 5).with_site(Site::z(1)), &sae_path).unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        &json!({
            "eval_data": { "kind": "random_repeated", "n": 20, "seq_len": 16, "seed": 0 },
            "features": [0, 4, 7],
            "k": 20
        }),
    );
    let out = dir.path().join("out");
    let common = [
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--sae",
        sae_path.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ];
    run(&[&["dashboards"], &common[..]].concat()).unwrap();
    let files: Vec<_> = fs::read_dir(out.join("dashboards")).unwrap().collect();
    assert_eq!(files.len(), 3);
    for i in [0, 4, 7] {
        let rec: DashboardRecord =
            serde_json::from_value(read(&out.join(format!("dashboards/blocks.1.attn.hook_z_feature_{i}.json")))).unwrap();
        assert_eq!(rec.feature, i);
        assert!(rec.top_examples.len() <= 20);
    }
    run(&[&["eval"], &common[..]].concat()).unwrap();
    assert_eq!(read(&out.join("report_blocks.1.attn.hook_z.json"))["schema_version"], 1);

    let wrong = dir.path().join("wrong.json");
    save_sae(&SaeParams::init(10, 24, 5).with_site(Site::z(1)), &wrong).unwrap();
    let e = run(&["eval", "--config", cfg.to_str().unwrap(), "--model", model.to_str().unwrap(), "--sae", wrong.to_str().unwrap()])
        .unwrap_err();
    assert_eq!(e.code, 1);
    assert!(e.message.contains("shape"), "{}", e.message);
}

#[test]
fn diverging_training_exits_nonzero_but_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("div.json");
    write(
        &cfg,
        &json!({
            "model": serde_json::from_str::<Value>(FIXTURE).unwrap(),
            "site": "blocks.1.attn.hook_z",
            "data": { "kind": "random_repeated", "n": 4000, "seq_len": 16, "seed": 1 },
            "eval_data": { "kind": "random_repeated", "n": 20, "seq_len": 16, "seed": 2 },
            "buffer_capacity": 4096,
            "train": { "lr": 10.0, "batch": 32, "total_steps": 1500, "resample_every": 0, "seed": 3 }
        }),
    );
    let out = dir.path().join("out");
    let e = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]).unwrap_err();
    assert_eq!(e.code, 1);
    assert!(e.message.contains("diverged"), "{}", e.message);
    assert_eq!(read(&out.join("stats.json"))["stats"]["divergence_flag"], true);
}
