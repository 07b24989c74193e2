use std::path::Path;
use std::process::{Command, Output};

use ata_core::models::{EncoderConfig, HeadKind, Network};
use serde_json::{json, Value};

fn ata(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ata"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("ATA_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> Value {
    json!({
        "model_name": "tiny",
        "source": {"kind": "synthetic", "images_per_class": 6,
                   "spec": {"name": "source", "class_count": 10, "seed": 3}},
        "targets": [{"kind": "synthetic", "images_per_class": 6,
                     "spec": {"name": "hue", "class_count": 5, "first_class": 10, "seed": 3,
                              "shift": {"hue_rotation_deg": 120.0}}}],
        "train": {"encoder": {"channels": [4, 4]}, "iterations": 4, "eval_episodes": 40,
                  "eval_queries_per_class": 4, "train_queries_per_class": 2,
                  "pretrain_epochs": 1},
        "augment": {"beta": 0.003, "t_max": 1, "p": 0.5, "filter_pool": [1, 3]},
        "finetune": {"epochs": 2, "pseudo": {"per_class": 2}},
        "finetune_episodes": 3
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("exp.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn eval_of_constant_model_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    // all-zero weights give identical features for every image, so every
    // query gets the same label and balanced queries score exactly 1/way
    let net = Network::new(
        EncoderConfig {
            channels: vec![4, 4],
            ..Default::default()
        },
        HeadKind::Prototypical,
    )
    .unwrap();
    let mut params = net.init_params(0);
    for (_, t) in params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    params.save(dir.path().join("zero")).unwrap();
    let mut cfg = tiny_config();
    cfg["checkpoint"] = json!("zero");
    let config = write_config(dir.path(), &cfg);
    let out = ata(&["eval", "-c", &config, "--output-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("out/results.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][..4], ["tiny", "hue", "5", "1"]);
    let mean: f64 = rows[0][4].parse().unwrap();
    assert!((mean - 20.0).abs() < 1e-9, "mean {mean}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/eval-hue.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], json!(40));
}

#[test]
fn override_is_echoed_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = ata(
        &["meta-train", "-c", &config, "--set", "augment.t_max=0", "--set", "train.iterations=2", "--output-dir", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest-meta-train.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["augment"]["t_max"], json!(0));
    assert_eq!(manifest["config"]["train"]["iterations"], json!(2));
    assert_eq!(manifest["content_hash"].as_str().unwrap().len(), 64);
    let log = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(dir.path().join("run/model.json").exists());
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = Command::new(env!("CARGO_BIN_EXE_ata"))
        .args(["meta-train", "-c", &config, "--set", "train.iterations=1"])
        .current_dir(dir.path())
        .env("ATA_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("from-env/manifest-meta-train.json").exists());
}

#[test]
fn ablate_reg_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = ata(&["ablate-reg", "-c", &config, "--output-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("out/ablate_reg.csv"));
    let models: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(models, ["tiny/none", "tiny/euclid", "tiny/mmd"]);
}

#[test]
fn pretrain_then_finetune_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    let config = write_config(dir.path(), &cfg);
    let out = ata(&["pretrain", "-c", &config, "--output-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    cfg["encoder_checkpoint"] = json!("out/encoder");
    let config = write_config(dir.path(), &cfg);
    let out = ata(&["meta-train", "-c", &config, "--output-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    cfg["checkpoint"] = json!("out/model");
    let config = write_config(dir.path(), &cfg);
    let out = ata(&["finetune", "-c", &config, "--output-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("out/finetune.csv"));
    let models: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(models, ["finetune", "tiny+adapt"]);

    let out = ata(&["report", "out/finetune.csv", "--output-dir", "out", "--plot"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| tiny+adapt |"), "{table}");
    assert!(dir.path().join("out/report.md").exists());
    assert!(std::fs::read_to_string(dir.path().join("out/report.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg["train"]["iters"] = json!(3);
    let config = write_config(dir.path(), &cfg);
    let out = ata(&["eval", "-c", &config], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("iters"), "{}", stderr(&out));
}

#[test]
fn invalid_field_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = ata(&["meta-train", "-c", &config, "--set", "augment.p=1.5"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("p"), "{}", stderr(&out));
    let out = ata(&["meta-train", "-c", &config, "--set", "train.augment.t_max=0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg["checkpoint"] = json!("nowhere/model");
    let config = write_config(dir.path(), &cfg);
    let out = ata(&["eval", "-c", &config, "--output-dir", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
    // no checkpoint configured at all is a config problem
    let config = write_config(dir.path(), &tiny_config());
    let out = ata(&["eval", "-c", &config, "--output-dir", "out"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_invocation_exits_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ata(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(ata(&["eval"], dir.path()).status.code(), Some(1));
    assert_eq!(ata(&["eval", "-c", "absent.json"], dir.path()).status.code(), Some(1));
    assert_eq!(ata(&["--help"], dir.path()).status.code(), Some(0));
}
