//! End-to-end tests of the command-line binary: command wiring, file
//! outputs, determinism, and exit codes.

use bla::data::{save_idx, synth_planted_patch, Split};
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bla"))
}

/// Small IDX dataset directory (binary labels) for fast CLI runs.
fn write_dataset(dir: &Path) {
    let train = synth_planted_patch(64, 500, Split::Train);
    save_idx(
        &train.images,
        &train.labels,
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let val = synth_planted_patch(32, 501, Split::Validation);
    save_idx(
        &val.images,
        &val.labels,
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
}

fn write_config(path: &Path) {
    std::fs::write(path, "epochs = 1\n").unwrap();
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_eval_explain_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_dataset(&data);
    let cfg = tmp.path().join("run.cfg");
    write_config(&cfg);
    let data_s = data.to_str().unwrap();
    let cfg_s = cfg.to_str().unwrap();

    // Train two runs (seeds 0 and 1).
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "train", "--mode", "bla", "--data", data_s, "--config", cfg_s,
        "--out", out_dir.to_str().unwrap(), "--runs", "2",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("mode=bla seed=0"));
    assert!(text.contains("mode=bla seed=1"));
    assert!(out_dir.join("bla-seed0.blam").exists());
    assert!(out_dir.join("bla-seed1.blam").exists());
    let runs = std::fs::read_to_string(out_dir.join("runs.txt")).unwrap();
    assert_eq!(runs.trim(), text.trim());

    // Evaluate the checkpoint with the default (hard) and an override pooling.
    let ckpt = out_dir.join("bla-seed0.blam");
    let out = run(&["eval", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("accuracy="));
    let out = run(&[
        "eval", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap(),
        "--pooling", "soft",
    ]);
    assert!(out.status.success());

    // Explain with image outputs.
    let exp_dir = tmp.path().join("explained");
    let out = run(&[
        "explain", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap(),
        "--out", exp_dir.to_str().unwrap(), "--count", "5", "--images", "2",
    ]);
    assert!(out.status.success(), "{out:?}");
    let lines = std::fs::read_to_string(exp_dir.join("explanations.txt")).unwrap();
    assert_eq!(lines.lines().count(), 5);
    for line in lines.lines() {
        bla::export::parse_explanation_record(line).unwrap();
    }
    let pgm = std::fs::read(exp_dir.join("input-0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
    let qmap = std::fs::read(exp_dir.join("qmap-0.pgm")).unwrap();
    assert!(qmap.starts_with(b"P5\n7 7\n255\n"));
    let overlay = std::fs::read(exp_dir.join("overlay-1.ppm")).unwrap();
    assert!(overlay.starts_with(b"P6\n28 28\n255\n"));
    assert!(exp_dir.join("heatmap-1.ppm").exists());
    assert!(!exp_dir.join("input-2.pgm").exists());

    // Report over the run records.
    let out = run(&["report", out_dir.join("runs.txt").to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("bla"));
    assert!(text.contains("accuracy"));
}

#[test]
fn train_is_bit_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_dataset(&data);
    let cfg = tmp.path().join("run.cfg");
    write_config(&cfg);
    let data_s = data.to_str().unwrap();

    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = run(&[
            "train", "--mode", "bla", "--data", data_s,
            "--config", cfg.to_str().unwrap(),
            "--out", dir.to_str().unwrap(), "--seed", "7",
        ]);
        assert!(out.status.success(), "{out:?}");
        outputs.push((
            std::fs::read(dir.join("bla-seed7.blam")).unwrap(),
            std::fs::read_to_string(dir.join("runs.txt")).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "checkpoints differ");
    assert_eq!(outputs[0].1, outputs[1].1, "run records differ");
}

#[test]
fn faithfulness_command_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_dataset(&data);
    let cfg = tmp.path().join("run.cfg");
    write_config(&cfg);
    let data_s = data.to_str().unwrap();

    let out_dir = tmp.path().join("out");
    let out = run(&[
        "train", "--mode", "bla", "--data", data_s, "--config", cfg.to_str().unwrap(),
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let faith_dir = tmp.path().join("faith");
    let out = run(&[
        "faithfulness", "--data", data_s,
        "--checkpoint", out_dir.join("bla-seed0.blam").to_str().unwrap(),
        "--out", faith_dir.to_str().unwrap(),
        "--count", "4", "--num-samples", "120",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("spearman_lime_soft="));
    assert!(text.contains("spearman_lime_cam="));
    assert!(text.contains("spearman_lime_random="));
    assert!(text.contains("p_soft_vs_random="));
    let lines = std::fs::read_to_string(faith_dir.join("saliency.txt")).unwrap();
    assert_eq!(lines.lines().count(), 16); // 4 methods x 4 images
    for line in lines.lines() {
        bla::export::parse_saliency_record(line).unwrap();
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    // Usage errors -> 1; help -> 0.
    assert_eq!(run(&["train"]).status.code(), Some(1)); // missing --out
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));

    // Config errors -> 1.
    let out = run(&[
        "train", "--mode", "wat", "--data", "synthetic",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[
        "train", "--mode", "bla-ph", "--data", "synthetic",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "unknown_key = 1\n").unwrap();
    let out = run(&[
        "train", "--mode", "bl", "--data", "synthetic",
        "--config", bad_cfg.to_str().unwrap(),
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // IO/file-format errors -> 2.
    let out = run(&[
        "eval", "--data", "synthetic",
        "--checkpoint", tmp.path().join("absent.blam").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "train", "--mode", "bl",
        "--data", tmp.path().join("no-dataset-here").to_str().unwrap(),
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["report", tmp.path().join("absent.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
