//! End-to-end checks of the command-line surface: exit codes, printed
//! contracts, and a miniature train→eval→predict pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn wxnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wxnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = wxnn(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unknown_flag_exits_2() {
    let out = wxnn(&["analyze", "--manifest", "x.csv", "--bogus"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let out = wxnn(&["analyze", "--manifest", "/nonexistent/m.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error"), "{}", stderr(&out));
}

#[test]
fn gradcheck_cells_passes() {
    let out = wxnn(&["gradcheck", "--module", "cells"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS: fc_lstm_step"), "{text}");
    assert!(text.contains("PASS: conv_lstm_step"), "{text}");
}

#[test]
fn gradcheck_rejects_unknown_module() {
    let out = wxnn(&["gradcheck", "--module", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_prints_three_sample_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(
        &manifest,
        "path,A,B\nimg1.ppm,1.0,1.0\nimg2.ppm,1.0,0.0\nimg3.ppm,0.0,1.0\n",
    )
    .unwrap();
    let out = wxnn(&["analyze", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("A,1,0.5"), "{text}");
    assert!(text.contains("B,0.5,1"), "{text}");
    assert!(text.contains("order: A -> B"), "{text}");
    assert!(text.contains(">1 label=1"), "{text}");
}

#[test]
fn analyze_add_other_extends_classes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "path,A\nimg1.ppm,0.2\nimg2.ppm,0.9\n").unwrap();
    let out = wxnn(&[
        "analyze",
        "--manifest",
        manifest.to_str().unwrap(),
        "--add-other",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("other=1"), "{text}");
}

#[test]
fn micro_pipeline_synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out = wxnn(&[
        "synth",
        "--out",
        data_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--samples",
        "12",
        "--seed",
        "3",
        "--image-size",
        "32",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest = data_dir.join("manifest.csv");
    assert!(manifest.exists());

    let config = dir.path().join("micro.cfg");
    std::fs::write(
        &config,
        "backbone = 4x1,8x1\ninput-size = 16\npre-size = 16\nepochs-stage1 = 3\n\
         epochs-stage2 = 3\nbatch-size = 6\nlr = 0.003\ndropout = 0.25\n\
         noise-sigma = 0.0\nflip-prob = 0.0\nseed = 5\n",
    )
    .unwrap();

    let ckpt = dir.path().join("model.ckpt");
    let out = wxnn(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--val",
        manifest.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--order",
        "auto",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    // the chosen order is logged before training starts
    let order_pos = text.find("label order:").expect(&text);
    let stage_pos = text.find("stage 1:").expect(&text);
    assert!(order_pos < stage_pos, "{text}");
    assert!(ckpt.exists());
    assert!(Path::new(&ckpt.with_extension("stage1.csv")).exists());
    assert!(Path::new(&ckpt.with_extension("stage2.csv")).exists());
    let log = std::fs::read_to_string(ckpt.with_extension("stage2.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,lr,wall_ms"), "{log}");
    assert_eq!(log.lines().count(), 4, "{log}"); // header + 3 epochs

    let report = dir.path().join("report.csv");
    let out = wxnn(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("c0,c1,AP,AR,AF1,OP,OR,OF1"), "{csv}");

    // literal OR mode is also exposed
    let out = wxnn(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--or-mode",
        "literal",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("OR mode: literal"));

    let attn = dir.path().join("attention.csv");
    let out = wxnn(&[
        "predict",
        "--image",
        data_dir.join("img_00000.ppm").to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--dump-attention",
        attn.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("class,probability,label"), "{text}");
    assert!(text.contains("c0,"), "{text}");
    let attn_csv = std::fs::read_to_string(&attn).unwrap();
    assert!(attn_csv.starts_with("step,class,z0"), "{attn_csv}");
    assert_eq!(attn_csv.lines().count(), 3, "{attn_csv}"); // header + 2 steps
}

#[test]
fn train_stage_1_then_2_via_init() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out = wxnn(&[
        "synth",
        "--out",
        data_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--samples",
        "8",
        "--seed",
        "4",
        "--image-size",
        "32",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest = data_dir.join("manifest.csv");

    let config = dir.path().join("micro.cfg");
    std::fs::write(
        &config,
        "backbone = 4x1,8x1\ninput-size = 16\npre-size = 16\nepochs-stage1 = 1\n\
         epochs-stage2 = 1\nbatch-size = 8\nnoise-sigma = 0.0\n",
    )
    .unwrap();

    let stage1 = dir.path().join("stage1.ckpt");
    let out = wxnn(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--val",
        manifest.to_str().unwrap(),
        "--out",
        stage1.to_str().unwrap(),
        "--stage",
        "1",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));

    // stage 2 without --init fails with a clear message
    let full = dir.path().join("full.ckpt");
    let out = wxnn(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--val",
        manifest.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
        "--stage",
        "2",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--init"), "{}", stderr(&out));

    let out = wxnn(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--val",
        manifest.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
        "--stage",
        "2",
        "--init",
        stage1.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));
    assert!(full.exists());

    // a stage-1 checkpoint cannot be evaluated
    let out = wxnn(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ckpt",
        stage1.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let out = wxnn(&[
        "synth",
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--classes",
        "2",
        "--samples",
        "0",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = wxnn(&[
        "synth",
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--classes",
        "9",
        "--samples",
        "2",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1), "more than 8 classes must fail");
}

#[test]
fn seeded_runs_are_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = wxnn(&[
            "synth",
            "--out",
            d.to_str().unwrap(),
            "--classes",
            "3",
            "--samples",
            "4",
            "--seed",
            "42",
            "--image-size",
            "24",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for name in ["manifest.csv", "img_00000.ppm", "img_00003.ppm"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical seeded runs");
    }
}
