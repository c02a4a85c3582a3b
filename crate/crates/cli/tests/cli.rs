//! Drives the `crackseg` binary end to end on a tiny synthetic dataset.

use std::path::Path;
use std::process::{Command, Output};

use crackseg_core::synth::write_dataset;
use tempfile::TempDir;

fn crackseg(verb: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .arg(verb)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}: {stderr}", out.status);
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failure_kind(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with("error[")).unwrap_or_default();
    line.trim_start_matches("error[").split(']').next().unwrap_or_default().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--input_size",
    "32x32",
    "--base_channels",
    "4",
    "--mask_groups",
    "2",
    "--batch_size",
    "2",
    "--val_fraction",
    "0.25",
];

#[test]
fn train_eval_predict_profile() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 4, (32, 32), 1).unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["--data_root", s(&data), "--out", s(&run), "--epochs", "2", "--fusion_mode", "none"];
    args.extend(SMALL);
    ok(&crackseg("train", &args));
    for f in ["best.ckpt", "last.ckpt", "train_log.tsv", "resolved.cfg", "train_manifest.tsv", "val_manifest.tsv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let resolved = std::fs::read_to_string(run.join("resolved.cfg")).unwrap();
    assert!(resolved.lines().any(|l| l == "fusion_mode = none"), "{resolved}");
    assert!(resolved.lines().any(|l| l == "epochs = 2"));
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("best.ckpt");
    let eval_dir = tmp.path().join("eval");
    let stdout = ok(&crackseg(
        "eval",
        &["--data_root", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval_dir), "--input_size", "32x32"],
    ));
    assert!(stdout.contains("4 images"), "{stdout}");
    for f in ["metrics_micro.txt", "metrics_macro.txt", "per_image.tsv"] {
        assert!(eval_dir.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(eval_dir.join("per_image.tsv")).unwrap().lines().count(), 5);

    // An image whose size is not a multiple of 16 is padded for the model and cropped back.
    let inputs = tmp.path().join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    image::RgbImage::from_pixel(37, 50, image::Rgb([120, 120, 120])).save(inputs.join("odd.png")).unwrap();
    std::fs::write(inputs.join("junk.png"), b"not an image").unwrap();
    let pred_dir = tmp.path().join("pred");
    ok(&crackseg("predict", &["--input", s(&inputs), "--checkpoint", s(&ckpt), "--out", s(&pred_dir)]));
    let mask = image::open(pred_dir.join("odd_mask.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (37, 50));
    assert!(pred_dir.join("odd_overlay.png").exists());
    assert!(!pred_dir.join("junk_mask.png").exists());

    let prof = tmp.path().join("prof");
    ok(&crackseg("profile", &["--checkpoint", s(&ckpt), "--out", s(&prof), "--input_size", "64x64"]));
    let report = std::fs::read_to_string(prof.join("profile.txt")).unwrap();
    for key in ["params_millions", "frozen_params_millions", "gflops", "latency_ms_mean", "latency_ms_std"] {
        assert!(report.contains(key), "{key} missing from {report}");
    }
}

#[test]
fn config_file_and_overrides_merge() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nepochs = 7\nfusion_mode = concat\n").unwrap();
    let out = tmp.path().join("prof");
    let args = ["--config", s(&cfg), "--out", s(&out), "--fusion_mode", "igam", "--base_channels", "4"];
    let mut args = args.to_vec();
    args.extend(["--input_size", "32x32", "--deterministic"]);
    ok(&crackseg("profile", &args));
    let resolved = std::fs::read_to_string(out.join("resolved.cfg")).unwrap();
    for line in ["epochs = 7", "fusion_mode = igam", "deterministic = true", "input_size = 32x32"] {
        assert!(resolved.lines().any(|l| l == line), "{line} not in {resolved}");
    }
}

#[test]
fn failures_exit_with_named_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("nowhere");
    assert_eq!(failure_kind(&crackseg("profile", &["--colour", "blue"])), "ConfigError");
    assert_eq!(failure_kind(&crackseg("profile", &["--out", s(&out), "--input_size", "100x100"])), "BadTargetSize");
    assert_eq!(failure_kind(&crackseg("train", &["--data_root", s(&missing), "--out", s(&out)])), "IOError");

    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(empty.join("images")).unwrap();
    std::fs::create_dir_all(empty.join("masks")).unwrap();
    assert_eq!(failure_kind(&crackseg("train", &["--data_root", s(&empty), "--out", s(&out)])), "EmptyDataset");

    let weights = tmp.path().join("missing.weights");
    let args = ["--backend", &format!("pretrained:{}", s(&weights)), "--out", s(&out)];
    assert_eq!(failure_kind(&crackseg("profile", &args)), "BackendUnavailable");
}
