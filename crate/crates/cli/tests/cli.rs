//! End-to-end runs of the binary: the full pipeline on a tiny dataset,
//! plus the exit-code contract for bad invocations and corrupt files.

use std::path::Path;
use std::process::{Command, Output};

fn bokehnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bokehnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_run_config(path: &Path, data_dir: &Path, out_dir: &Path) {
    let cfg = serde_json::json!({
        "data_dir": data_dir,
        "out_dir": out_dir,
        "model": {
            "in_channels": 4,
            "out_channels": 3,
            "levels": 2,
            "base_width": 2,
            "leaky_alpha": 0.2,
            "norm_levels": [2],
            "norm_eps": 1e-5,
        },
        "seed": 9,
        "batch_size": 4,
        "epochs_per_level": 1,
        "learning_rate": 1e-3,
        "level1_lr_scale": 0.5,
        "checkpoint_every": 1,
        "deterministic": false,
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn full_pipeline_runs_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out_dir = dir.path().join("out");

    let out = bokehnet(&[
        "gen-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--pairs",
        "10",
        "--size",
        "32",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("dataset.json").is_file());
    assert!(data_dir.join("pair0009_target.png").is_file());
    let manifest: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(manifest["train"], 8);

    let cfg_path = dir.path().join("run.json");
    write_run_config(&cfg_path, &data_dir, &out_dir);
    let out = bokehnet(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("last.ckpt").is_file());
    assert!(out_dir.join("best.ckpt").is_file());
    assert!(out_dir.join("events.ndjson").is_file());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["stages"].as_array().unwrap().len(), 2);
    assert!(summary["test"]["psnr"].as_f64().unwrap().is_finite());

    let ckpt = out_dir.join("last.ckpt");
    let pred = dir.path().join("pred.png");
    let out = bokehnet(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        data_dir.join("pair0009_input.png").to_str().unwrap(),
        "--depth",
        data_dir.join("pair0009_depth.png").to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&pred).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));

    let out = bokehnet(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--split",
        "val",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["psnr", "ssim", "baseline_psnr", "baseline_ssim"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
    }

    let out = bokehnet(&[
        "ablate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);

    let out = bokehnet(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--resume",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_reports_latency_quantiles() {
    let out = bokehnet(&[
        "bench", "--levels", "2", "--width", "2", "--size", "32", "--runs", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for mode in ["single_thread", "multi_thread"] {
        let median = v[mode]["median_ms"].as_f64().unwrap();
        let p90 = v[mode]["p90_ms"].as_f64().unwrap();
        assert!(median > 0.0 && p90 >= median, "{mode}: {median} {p90}");
    }
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let out = bokehnet(&["definitely-not-a-command"]);
    assert_eq!(out.status.code(), Some(2));

    let out = bokehnet(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let out = bokehnet(&[
        "gen-data",
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--pairs",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2), "pairs below the minimum");

    let out = bokehnet(&[
        "eval",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"JUNKJUNKJUNKJUNK").unwrap();
    let out = bokehnet(&[
        "eval",
        "--checkpoint",
        junk.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let data_dir = dir.path().join("data");
    let out = bokehnet(&[
        "gen-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--pairs",
        "10",
        "--size",
        "32",
    ]);
    assert!(out.status.success());
    std::fs::write(data_dir.join("pair0003_depth.png"), b"not a png").unwrap();
    let cfg_path = dir.path().join("run.json");
    write_run_config(&cfg_path, &data_dir, &dir.path().join("out"));
    let out = bokehnet(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
