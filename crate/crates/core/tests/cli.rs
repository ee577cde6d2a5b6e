mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use matchbox::audio;

use common::{sine, white_noise};

fn matchbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matchbox"))
        .args(args)
        .env("MATCHBOX_NUM_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A miniature Speech Commands layout: two words, list files and a
/// background noise folder.
fn fake_corpus(root: &Path) {
    for (word, f) in [("yes", 500.0), ("no", 2000.0)] {
        let dir = root.join(word);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..8 {
            let clip = sine(f + 40.0 * i as f32, 0.3, 1.0);
            audio::write_wav(&dir.join(format!("spk{i}_nohash_0.wav")), &clip).unwrap();
        }
    }
    fs::write(root.join("validation_list.txt"), "yes/spk6_nohash_0.wav\nno/spk6_nohash_0.wav\n").unwrap();
    fs::write(root.join("testing_list.txt"), "yes/spk7_nohash_0.wav\nno/spk7_nohash_0.wav\n").unwrap();
    let noise = root.join("_background_noise_");
    fs::create_dir_all(&noise).unwrap();
    audio::write_wav(&noise.join("white.wav"), &white_noise(0.1, 3.5, 1)).unwrap();
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    fake_corpus(&root);
    let p = |s: &str| tmp.path().join(s).display().to_string();
    let noise = root.join("_background_noise_").display().to_string();

    let out = matchbox(&[
        "prepare-data",
        "--root",
        root.to_str().unwrap(),
        "--dataset-version",
        "custom",
        "--words",
        "yes,no",
        "--noise-dir",
        &noise,
        "--out-dir",
        &p("data"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("train=12 validation=2 test=2 classes=2"), "{}", stdout(&out));
    assert!(Path::new(&p("data/noise_segments/segment_000002.wav")).exists());
    assert!(Path::new(&p("data/resolved-config.json")).exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("data/noise_report.json")).unwrap()).unwrap();
    assert_eq!(report["segments"], 3);

    let out = matchbox(&[
        "train",
        "--data-dir",
        &p("data"),
        "--model",
        "1x1x8",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--trials",
        "2",
        "--seed",
        "3",
        "--noise-dir",
        &noise,
        "--background-noise",
        "--out-dir",
        &p("run"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("ci95="), "{}", stdout(&out));
    let metrics = fs::read_to_string(p("run/trial-1/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "step", "lr", "train_loss", "val_acc"] {
        assert!(lines[1].get(key).is_some(), "missing {key}");
    }
    assert_eq!(lines[1]["step"], 6);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("run/train-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["channels"], 8);
    assert_eq!(resolved["augment"]["background_noise"], true);

    let a = p("run/trial-0/best.ckpt");
    let b = p("run/trial-1/best.ckpt");
    let out = matchbox(&["eval", "--ckpt", &a, "--ckpt", &b, "--manifest", &p("data/test.jsonl"), "--out-dir", &p("eval")]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mean="));
    assert!(Path::new(&p("eval/eval.json")).exists());

    fs::write(p("empty.jsonl"), "").unwrap();
    let out = matchbox(&["eval", "--ckpt", &a, "--manifest", &p("empty.jsonl"), "--out-dir", &p("eval")]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=EmptyEvalSet "), "{err}");

    let out = matchbox(&[
        "sweep-snr",
        "--ckpt",
        &a,
        "--ckpt",
        &b,
        "--manifest",
        &p("data/test.jsonl"),
        "--noise-dir",
        &noise,
        "--draws",
        "2",
        "--out-dir",
        &p("sweep"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4, "{table}");
    let header: Vec<&str> = rows[0].split('|').map(str::trim).collect();
    assert_eq!(header[1..], ["-10", "0", "10", "20", "30", "40", "50"]);
    assert!(rows[2].starts_with("1x1x8") && rows[3].starts_with("1x1x8"));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("sweep/snr_sweep.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[0]["accuracy"].as_array().unwrap().len(), 7);

    let out = matchbox(&["inspect-ckpt", "--ckpt", &a, "--out-dir", &p("inspect")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("\"model_name\": \"1x1x8\""), "{text}");
    assert!(text.contains("conv1.depthwise.weight [64, 11]"), "{text}");
    assert!(text.contains("blocks.0.sub.0.bn.running_var [8]"), "{text}");
}

#[test]
fn count_params_prints_the_integer() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().display().to_string();
    let out = matchbox(&["count-params", "--model", "3x2x64", "--classes", "35", "--out-dir", &out_dir]);
    assert!(out.status.success());
    let n: f64 = stdout(&out).trim().parse().unwrap();
    assert!((n - 93_000.0).abs() <= 9_300.0, "{n}");

    // default vocabulary follows the dataset version
    let v1 = matchbox(&["count-params", "--model", "3x2x64", "--dataset-version", "v1", "--out-dir", &out_dir]);
    let v1: usize = stdout(&v1).trim().parse().unwrap();
    assert_eq!(n as usize - v1, 5 * 129);
    assert!(tmp.path().join("resolved-config.json").exists());
}

#[test]
fn config_errors_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 3, "optimizer": {"lr_maxx": 0.1}}"#).unwrap();
    let out_dir = tmp.path().display().to_string();
    let out = matchbox(&["count-params", "--config", cfg.to_str().unwrap(), "--out-dir", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: kind=ConfigError message="), "{}", stderr(&out));

    let out = matchbox(&["count-params", "--model", "three", "--out-dir", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: kind=UsageError"));

    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"RIFF0000").unwrap();
    let out = matchbox(&["inspect-ckpt", "--ckpt", bad.to_str().unwrap(), "--out-dir", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: kind=BadMagic"));
}

#[test]
fn valid_config_file_is_applied_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 9, "model": {"blocks": 6, "sub_blocks": 2, "channels": 64, "n_classes": 35, "n_feat": 64,
        "prologue_channels": 128, "prologue_kernel": 11, "block_kernels": [13, 15, 17, 19, 21, 23],
        "epilogue_channels": 128, "epilogue_kernel": 29, "epilogue_dilation": 2, "dropout_p": 0.1}}"#)
    .unwrap();
    let out_dir = tmp.path().display().to_string();
    let out = matchbox(&["count-params", "--config", cfg.to_str().unwrap(), "--out-dir", &out_dir]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "139491");

    let out = matchbox(&["count-params", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out-dir", &out_dir]);
    assert!(out.status.success());
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["seed"], 4);
    assert_eq!(resolved["config"]["model"]["blocks"], 6);
}
