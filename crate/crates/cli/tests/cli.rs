mod common;

use std::path::Path;
use std::process::{Command, Output};

use ovd_core::checkpoint::save_checkpoint;
use serde_json::Value;

fn ovd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovd"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovd(&["detect", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(ovd(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovd(
        &[
            "detect",
            "--checkpoint",
            "missing.ckpt",
            "--image",
            "x.png",
            "--text",
            "red circle",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn detect_prints_json_detections() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&common::tiny_detector(), 1, &dir.path().join("m.ckpt")).unwrap();
    std::fs::write(
        dir.path().join("x.png"),
        common::test_image(16).to_png().unwrap(),
    )
    .unwrap();
    let o = ovd(
        &[
            "detect",
            "--checkpoint",
            "m.ckpt",
            "--image",
            "x.png",
            "--text",
            "red circle,blue square",
            "--threshold",
            "0",
            "--top-k",
            "4",
        ],
        dir.path(),
    );
    let v = stdout_json(&o);
    let dets = v["detections"].as_array().unwrap();
    assert_eq!(dets.len(), 4);
    for d in dets {
        let name = d["query_name"].as_str().unwrap();
        assert!(name == "red circle" || name == "blue square");
    }
    let bad = ovd(
        &[
            "detect",
            "--checkpoint",
            "m.ckpt",
            "--image",
            "x.png",
            "--text",
            "a",
            "--threshold",
            "1.5",
        ],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn extract_query_reports_fallback() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&common::tiny_detector(), 1, &dir.path().join("m.ckpt")).unwrap();
    std::fs::write(
        dir.path().join("x.png"),
        common::test_image(16).to_png().unwrap(),
    )
    .unwrap();
    let v = stdout_json(&ovd(
        &[
            "extract-query",
            "--checkpoint",
            "m.ckpt",
            "--image",
            "x.png",
            "--box",
            "0,0,0.02,0.02",
        ],
        dir.path(),
    ));
    assert_eq!(v["fallback"], true);
    assert_eq!(v["embedding"].as_array().unwrap().len(), 16);
}

#[test]
fn ablate_selects_rows() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&ovd(&["ablate", "--rows", "7,11", "--dry-run"], dir.path()));
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["row"], 7);
    assert_eq!(
        rows[0]["config"]["augment"]["mosaic"]["probabilities"],
        serde_json::json!([1.0, 0.0, 0.0])
    );
    assert_eq!(rows[1]["config"]["location_bias"], false);
    assert_eq!(
        ovd(&["ablate", "--rows", "16", "--dry-run"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn synth_pretrain_finetune_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ovd(
        &[
            "synth-data",
            "--n-train",
            "12",
            "--n-eval",
            "4",
            "--image-size",
            "16",
            "--seed",
            "5",
            "--out",
            "data",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.json", "train_full.json", "eval.json", "spec.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    std::fs::write(
        d.join("model.json"),
        serde_json::to_string(&common::tiny_config()).unwrap(),
    )
    .unwrap();
    std::fs::write(d.join("pre.toml"), "steps = 2\nbatch_size = 4\n").unwrap();
    std::fs::write(
        d.join("ft.toml"),
        "steps = 2\nbatch_size = 2\n[augment]\ndataset_ratios = [1.0]\nmosaic = { probabilities = [0.5, 0.5] }\n",
    )
    .unwrap();
    let o = ovd(
        &[
            "pretrain",
            "--data",
            "data/train.json",
            "--model-config",
            "model.json",
            "--config",
            "pre.toml",
            "--metrics",
            "pre.jsonl",
            "--out",
            "pre.ckpt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.join("pre.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["components"]["contrastive"]
        .as_f64()
        .unwrap()
        .is_finite());

    let o = ovd(
        &[
            "finetune",
            "--data",
            "data/train.json",
            "--init",
            "pre.ckpt",
            "--config",
            "ft.toml",
            "--out",
            "det.ckpt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spec: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("data/spec.json")).unwrap()).unwrap();
    let held: Vec<&str> = spec["held_out"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let held = held.join(",");
    let v = stdout_json(&ovd(
        &[
            "evaluate",
            "--checkpoint",
            "det.ckpt",
            "--data",
            "data/eval.json",
            "--held-out",
            &held,
            "--pr-csv",
            "pr.csv",
        ],
        d,
    ));
    let ap50 = v["ap50"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap50));
    assert!(v["ap50_heldout"].is_number());
    assert!(std::fs::read_to_string(d.join("pr.csv"))
        .unwrap()
        .starts_with("category,iou,recall,precision"));

    let o = ovd(
        &[
            "finetune",
            "--data",
            "data/train.json",
            "--config",
            "ft.toml",
            "--out",
            "x.ckpt",
        ],
        d,
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "fine-tuning without a pre-trained model must fail"
    );
    let o = ovd(
        &[
            "evaluate",
            "--checkpoint",
            "pre.ckpt",
            "--data",
            "data/eval.json",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
}
