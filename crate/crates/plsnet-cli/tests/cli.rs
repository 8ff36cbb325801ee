//! End-to-end tests of the command-line surface: every subcommand runs as a
//! real process, exercising the same binary users invoke.

use std::path::Path;
use std::process::{Command, Output};

fn plsnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plsnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// Small phantom + tiny network so train/infer cycles stay fast.
fn write_small_spec(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("spec.json");
    let spec = serde_json::json!({
        "extent": 16,
        "seed": 0,
        "spacing_mm": [1.0, 1.0, 1.0],
        "right_lung": { "center": [0.52, 0.30, 0.50], "radii": [0.42, 0.21, 0.40] },
        "left_lung": { "center": [0.52, 0.74, 0.50], "radii": [0.42, 0.19, 0.40] },
        "right_planes": [
            { "normal": [0.936, 0.281, 0.169], "offset": 0.506 },
            { "normal": [0.943, -0.207, 0.236], "offset": 0.62 }
        ],
        "left_plane": { "normal": [0.95, 0.228, -0.19], "offset": 0.549 },
        "lobe_means": [0.35, 0.5, 0.65, 0.8, 0.95],
        "background_mean": 0.0,
        "noise_sigma": 0.03,
        "fissure_depth": -0.3,
        "fissure_half_thickness": 0.012,
        "fissure_gap_fraction": 0.25
    });
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("net.json");
    let cfg = serde_json::json!({
        "classes": 6,
        "growth": 2,
        "channels": [2, 3, 4, 5],
        "drdbs_per_level": [1, 1, 1],
        "input_reinforcement": true,
        "depthwise_separable": true,
        "residual_dense": true,
        "dilations": [1, 2, 3, 4]
    });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn analyze_default_config_reports_quarter_million_params() {
    let dir = tempfile::tempdir().unwrap();
    let out = plsnet(&["analyze"], dir.path());
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("0.250 M"), "missing params line:\n{text}");
    assert!(text.contains("total MACs"), "missing MACs line:\n{text}");
    // resolved config echoed for reproducibility
    assert!(stderr(&out).contains("# config:"));
}

#[test]
fn analyze_json_matches_text_totals() {
    let dir = tempfile::tempdir().unwrap();
    let json_out = plsnet(&["analyze", "--json"], dir.path());
    assert_success(&json_out);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&json_out)).expect("stdout is JSON");
    let report = &doc["report"];
    let total_macs = report["total_macs"].as_u64().unwrap();
    let total_params = report["total_params"].as_u64().unwrap();

    let text_out = plsnet(&["analyze"], dir.path());
    let text = stdout(&text_out);
    assert!(text.contains(&total_macs.to_string()), "MACs differ between text and JSON");
    assert!(text.contains(&total_params.to_string()), "params differ between text and JSON");

    // layer rows add up to the totals
    let sum: u64 = report["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["macs"].as_u64().unwrap())
        .sum();
    assert_eq!(sum, total_macs);
}

#[test]
fn analyze_missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = plsnet(&["analyze", "--config", "nope.json"], dir.path());
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stdout(&out).is_empty(), "no partial output on config errors");
}

#[test]
fn phantom_writes_volumes_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    let args = [
        "phantom",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        "cases",
        "--count",
        "3",
        "--seed",
        "9",
    ];
    assert_success(&plsnet(&args, dir.path()));

    let case_dir = dir.path().join("cases");
    let mut entries: Vec<String> = std::fs::read_dir(&case_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    // 3 cases x (image, labels) x (header, body) + manifest
    assert_eq!(entries.len(), 13, "{entries:?}");
    assert!(entries.contains(&"manifest.json".to_string()));
    assert!(entries.contains(&"case_000_image.json".to_string()));
    assert!(entries.contains(&"case_002_labels.raw".to_string()));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(case_dir.join("manifest.json")).unwrap())
            .unwrap();
    let seeds: Vec<u64> = manifest["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![9, 10, 11]);

    // rerun into another directory: bit-identical files
    let args2 = [
        "phantom",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        "rerun",
        "--count",
        "3",
        "--seed",
        "9",
    ];
    assert_success(&plsnet(&args2, dir.path()));
    for name in &entries {
        if name == "manifest.json" {
            continue;
        }
        let a = std::fs::read(case_dir.join(name)).unwrap();
        let b = std::fs::read(dir.path().join("rerun").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn train_infer_evaluate_inspect_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    let config = write_tiny_config(dir.path());

    assert_success(&plsnet(
        &["phantom", "--spec", spec.to_str().unwrap(), "--out", "cases", "--count", "1", "--seed", "3"],
        dir.path(),
    ));

    // train two epochs, twice, with the same seed
    for ckpt in ["net_a.ckpt", "net_b.ckpt"] {
        let out = plsnet(
            &[
                "train",
                "--train",
                "cases/manifest.json",
                "--val",
                "cases/manifest.json",
                "--config",
                config.to_str().unwrap(),
                "--out",
                ckpt,
                "--max-epochs",
                "2",
                "--seed",
                "5",
            ],
            dir.path(),
        );
        assert_success(&out);
        assert!(stdout(&out).contains("max epochs reached"), "{}", stdout(&out));
    }
    let csv_a = std::fs::read(dir.path().join("net_a_loss.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("net_b_loss.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "training is not reproducible");
    assert_eq!(
        std::fs::read(dir.path().join("net_a.ckpt")).unwrap(),
        std::fs::read(dir.path().join("net_b.ckpt")).unwrap()
    );
    let csv_text = String::from_utf8(csv_a).unwrap();
    assert!(csv_text.starts_with("epoch,train_loss,val_loss,seconds\n"));
    assert_eq!(csv_text.lines().count(), 3, "2 epochs -> header + 2 rows");

    // infer twice: native output grid, bit-identical label volumes
    for out_name in ["pred_a", "pred_b"] {
        let out = plsnet(
            &["infer", "--ckpt", "net_a.ckpt", "--in", "cases/case_000_image.json", "--out", out_name],
            dir.path(),
        );
        assert_success(&out);
        assert!(stdout(&out).contains(" s"), "must print wall-clock seconds");
    }
    assert_eq!(
        std::fs::read(dir.path().join("pred_a.raw")).unwrap(),
        std::fs::read(dir.path().join("pred_b.raw")).unwrap()
    );
    let pred_header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pred_a.json")).unwrap())
            .unwrap();
    assert_eq!(pred_header["dims"], serde_json::json!([16, 16, 16]));
    assert_eq!(pred_header["kind"], "labels");

    // evaluate reference against itself: perfect scores, text/CSV agreement
    let out = plsnet(
        &[
            "evaluate",
            "--pred",
            "cases/case_000_labels.json",
            "--ref",
            "cases/case_000_labels.json",
            "--csv",
            "eval.csv",
        ],
        dir.path(),
    );
    assert_success(&out);
    let text = stdout(&out);
    for lobe in ["RUL", "RML", "RLL", "LUL", "LLL"] {
        assert!(text.contains(lobe), "missing row {lobe}:\n{text}");
    }
    let dsc_ones = text.matches("1.0000").count();
    assert!(dsc_ones >= 6, "expected DSC 1.0000 rows:\n{text}");
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.contains("RUL,1.0000,0.0000"));
    assert!(csv.contains("overall,1.0000,0.0000"));

    // inspect a level-1 layer: one file per channel
    let out = plsnet(
        &[
            "inspect",
            "--ckpt",
            "net_a.ckpt",
            "--in",
            "cases/case_000_image.json",
            "--layer",
            "enc1.down",
            "--slice",
            "4",
            "--out",
            "maps",
        ],
        dir.path(),
    );
    assert_success(&out);
    let maps: Vec<String> = std::fs::read_dir(dir.path().join("maps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(maps.len(), 3, "tiny config level-1 down conv has 3 channels: {maps:?}");
    assert!(maps.iter().all(|m| m.ends_with(".pgm")));

    // unknown layer: exit 2 plus a listing of valid names
    let out = plsnet(
        &[
            "inspect",
            "--ckpt",
            "net_a.ckpt",
            "--in",
            "cases/case_000_image.json",
            "--layer",
            "enc9.bogus",
            "--out",
            "maps",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("enc1.down") && err.contains("probs"), "listing missing:\n{err}");
}

#[test]
fn train_rejects_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.json"), "[]").unwrap();
    let out = plsnet(
        &[
            "train",
            "--train",
            "empty.json",
            "--val",
            "empty.json",
            "--out",
            "x.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn evaluate_rejects_grid_mismatch_with_dims_in_message() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    assert_success(&plsnet(
        &["phantom", "--spec", spec.to_str().unwrap(), "--out", "a", "--count", "1", "--seed", "1"],
        dir.path(),
    ));
    // second phantom at a different extent
    let text = std::fs::read_to_string(&spec).unwrap().replace("\"extent\": 16", "\"extent\": 24");
    std::fs::write(dir.path().join("spec24.json"), text).unwrap();
    assert_success(&plsnet(
        &["phantom", "--spec", "spec24.json", "--out", "b", "--count", "1", "--seed", "1"],
        dir.path(),
    ));

    let out = plsnet(
        &[
            "evaluate",
            "--pred",
            "a/case_000_labels.json",
            "--ref",
            "b/case_000_labels.json",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("16") && err.contains("24"), "dims missing from message:\n{err}");
}
