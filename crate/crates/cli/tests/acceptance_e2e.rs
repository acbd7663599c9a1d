//! Synthetic end-to-end acceptance: generate a dataset with a planted
//! co-occurrence mixture, verify `analyze` recovers the planted matrix,
//! run the full two-stage desk-scale training through the binary, and
//! require tp-mode OF1 >= 0.85 on a held-out 200-sample split, all
//! within a 15-minute budget.

use std::path::Path;
use std::process::{Command, Output};
use wxnn_core::dataio::CooccurrenceSpec;

fn wxnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wxnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn check(out: &Output, what: &str) -> String {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{what} failed:\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SPEC_TEXT: &str = "classes,sun,cloud,fog,rain\n\
    0.20,sun\n\
    0.16,cloud\n\
    0.15,sun,cloud\n\
    0.14,fog\n\
    0.12,fog,cloud\n\
    0.13,rain\n\
    0.10,rain,cloud\n";

const TRAIN_CFG: &str = "lr = 0.001\n\
    epochs-stage1 = 5\n\
    epochs-stage2 = 6\n\
    batch-size = 50\n\
    seed = 7\n";

fn split_manifest(manifest: &Path, train: &Path, heldout: &Path, held: usize) {
    let text = std::fs::read_to_string(manifest).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    assert!(rows.len() > held);
    let cut = rows.len() - held;
    let prefix = |rows: &[&str]| -> String {
        let mut out = String::from(header);
        out.push('\n');
        for r in rows {
            out.push_str("data/");
            out.push_str(r);
            out.push('\n');
        }
        out
    };
    std::fs::write(train, prefix(&rows[..cut])).unwrap();
    std::fs::write(heldout, prefix(&rows[cut..])).unwrap();
}

#[test]
fn acceptance_synthetic_end_to_end() {
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec_path = root.join("spec.csv");
    std::fs::write(&spec_path, SPEC_TEXT).unwrap();
    let data_dir = root.join("data");

    // --- synth: K=4, N=1200, planted co-occurrence mixture
    check(
        &wxnn(&[
            "synth",
            "--out",
            data_dir.to_str().unwrap(),
            "--samples",
            "1200",
            "--seed",
            "20260810",
            "--spec",
            spec_path.to_str().unwrap(),
            "--image-size",
            "96",
        ]),
        "synth",
    );

    // --- analyze recovers the planted R within ±0.05
    let reports = root.join("reports");
    check(
        &wxnn(&[
            "analyze",
            "--manifest",
            data_dir.join("manifest.csv").to_str().unwrap(),
            "--out-dir",
            reports.to_str().unwrap(),
        ]),
        "analyze",
    );
    let spec = CooccurrenceSpec::parse(SPEC_TEXT).unwrap();
    let planted = spec.expected_r();
    let k = spec.classes.len();
    let matrix_csv = std::fs::read_to_string(reports.join("cooccurrence.csv")).unwrap();
    let mut recovered = vec![0.0f64; k * k];
    for (i, line) in matrix_csv.lines().skip(1).enumerate() {
        for (j, field) in line.split(',').skip(1).enumerate() {
            recovered[i * k + j] = field.parse().unwrap();
        }
    }
    let mut max_dev = 0.0f64;
    for (got, want) in recovered.iter().zip(&planted) {
        max_dev = max_dev.max((got - want).abs());
    }
    assert!(
        max_dev <= 0.05,
        "recovered R deviates by {max_dev:.4} from the planted mixture\nrecovered: {recovered:?}\nplanted: {planted:?}"
    );
    println!("ACCEPTANCE e2e-analyze: PASS (max R deviation {max_dev:.4})");

    // --- held-out split of 200 samples
    let train_manifest = root.join("train.csv");
    let heldout_manifest = root.join("heldout.csv");
    split_manifest(
        &data_dir.join("manifest.csv"),
        &train_manifest,
        &heldout_manifest,
        200,
    );

    // --- two-stage desk training through the CLI
    let cfg_path = root.join("train.cfg");
    std::fs::write(&cfg_path, TRAIN_CFG).unwrap();
    let ckpt = root.join("model.ckpt");
    let text = check(
        &wxnn(&[
            "train",
            "--manifest",
            train_manifest.to_str().unwrap(),
            "--val",
            heldout_manifest.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--desk",
            "--order",
            "auto",
            "--config",
            cfg_path.to_str().unwrap(),
        ]),
        "train",
    );
    assert!(text.contains("label order:"), "{text}");

    // --- tp-mode OF1 >= 0.85 on the held-out split
    let report_path = root.join("metrics.csv");
    let text = check(
        &wxnn(&[
            "eval",
            "--manifest",
            heldout_manifest.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            report_path.to_str().unwrap(),
        ]),
        "eval",
    );
    let csv = std::fs::read_to_string(&report_path).unwrap();
    let values = csv.lines().nth(1).expect("value row");
    let of1: f64 = values.split(',').next_back().unwrap().parse().unwrap();
    assert!(of1 >= 0.85, "held-out OF1 {of1} below 0.85\n{text}\n{csv}");
    println!("ACCEPTANCE e2e-train-eval: PASS (held-out OF1 {of1:.4})");

    // --- predict works on a held-out image
    let text = check(
        &wxnn(&[
            "predict",
            "--image",
            data_dir.join("img_01100.ppm").to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
        ]),
        "predict",
    );
    assert!(text.contains("class,probability,label"), "{text}");

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 900,
        "end-to-end run took {elapsed:?}, budget is 15 minutes"
    );
    println!("ACCEPTANCE e2e-runtime: PASS ({elapsed:?})");
}
