mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use purls::bundle::write_split;
use purls::{write_bundle, SplitSpec};

fn purls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_purls"))
        .args(args)
        .env_remove("PURLS_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(out: &Path, seed: &str) -> Output {
    purls(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--classes",
        "6",
        "--unseen",
        "2",
        "--concepts",
        "3",
        "--samples-per-class",
        "3",
        "--temporal",
        "3",
        "--joints",
        "6",
        "--parts",
        "2",
        "--intervals",
        "3",
        "--feature-dim",
        "16",
        "--text-dim",
        "8",
        "--seed",
        seed,
    ])
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn missing_data_is_a_usage_error() {
    let o = purls(&["train", "--split", "s.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));
    assert_eq!(purls(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_purls"))
        .args(["validate", "--data", "nowhere"])
        .env("PURLS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_is_reproducible_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(synth(&a, "1").status.success());
    assert!(synth(&b, "1").status.success());
    assert!(synth(&c, "2").status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
    let split = a.join("split.json");
    let o = purls(&[
        "validate",
        "--data",
        a.to_str().unwrap(),
        "--split",
        split.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = purls(&[
        "synth",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--classes",
        "3",
        "--unseen",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = purls(&[
        "synth",
        "--out",
        tmp.path().join("y").to_str().unwrap(),
        "--concepts",
        "1",
        "--unseen",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_eval_export_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bundle");
    assert!(synth(&data, "3").status.success());
    let split = data.join("split.json");
    let ck = tmp.path().join("ck");
    let (d, s, c) = (data.to_str().unwrap(), split.to_str().unwrap(), ck.to_str().unwrap());
    let o = purls(&[
        "train",
        "--data",
        d,
        "--split",
        s,
        "--out",
        c,
        "--mode",
        "adaptive",
        "--seed",
        "7",
        "--max-epochs",
        "3",
        "--patience",
        "3",
        "--batch-size",
        "4",
        "--hidden-dim",
        "8",
        "--attention-dim",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ck.join("checkpoint.json").exists());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(ck.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["seed"], 7);

    let report = tmp.path().join("report.json");
    let o = purls(&[
        "eval",
        "--data",
        d,
        "--split",
        s,
        "--checkpoint",
        c,
        "--out",
        report.to_str().unwrap(),
        "--export-attention",
        "c0_s000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let top1 = r["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(tmp.path().join("attention_c0_s000.csv").exists());
    assert!(tmp.path().join("run_manifest.json").exists());

    let prefix = tmp.path().join("att");
    let o = purls(&[
        "export-attention",
        "--data",
        d,
        "--checkpoint",
        c,
        "--sample",
        "c1_s002",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("att.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 3 + 1);

    let o = purls(&[
        "export-attention",
        "--data",
        d,
        "--checkpoint",
        c,
        "--sample",
        "nope",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    // A bundle with other dimensions cannot be evaluated with this model.
    let other = tmp.path().join("other");
    let o = purls(&[
        "synth",
        "--out",
        other.to_str().unwrap(),
        "--classes",
        "6",
        "--unseen",
        "2",
        "--concepts",
        "3",
        "--samples-per-class",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let os = other.join("split.json");
    let o = purls(&[
        "eval",
        "--data",
        other.to_str().unwrap(),
        "--split",
        os.to_str().unwrap(),
        "--checkpoint",
        c,
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dims"), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bundle");
    assert!(synth(&data, "4").status.success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"max_epochs": 2, "patience": 2, "seed": 11, "hidden_dim": 6, "mode": "static"}"#,
    )
    .unwrap();
    let ck = tmp.path().join("ck");
    let split = data.join("split.json");
    let o = purls(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--split",
        split.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "12",
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(ck.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 12);
    assert_eq!(manifest["config"]["max_epochs"], 2);
    assert_eq!(manifest["config"]["mode"], "static");
}

#[test]
fn static_mode_without_map_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bundle = common::separable_bundle(3, 2, 0.1, 1);
    bundle.meta.static_map = None;
    let data = tmp.path().join("bundle");
    write_bundle(&bundle, &data).unwrap();
    let split = tmp.path().join("split.json");
    write_split(
        &split,
        &SplitSpec {
            seen: vec![0, 1],
            unseen: vec![2],
        },
    )
    .unwrap();
    let o = purls(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--split",
        split.to_str().unwrap(),
        "--mode",
        "static",
        "--out",
        tmp.path().join("ck").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("static_map"), "{}", stderr(&o));
}
