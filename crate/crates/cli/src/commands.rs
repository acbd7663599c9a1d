//! Subcommand implementations.

use crate::settings::TrainSettings;
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use std::path::Path;
use wxnn_core::cooccur::{self, StrengthTable};
use wxnn_core::dataio::{
    self, backbone_from_checkpoint, backbone_to_checkpoint, load_checkpoint, load_dataset,
    load_manifest, model_from_checkpoint, model_to_checkpoint, save_checkpoint,
    synth::CooccurrenceSpec, Dataset,
};
use wxnn_core::metrics::{self, LabelMatrix, MetricReport, OrMode};
use wxnn_core::model::{predict_labels, LabelOrder, WeatherModel};
use wxnn_core::trainer::{self, log_csv, Stage2Options, TrainConfig};

pub fn synth(
    out: &Path,
    classes: Option<usize>,
    samples: usize,
    seed: u64,
    spec_path: Option<&Path>,
    image_size: usize,
) -> Result<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading spec {}", p.display()))?;
            let spec = CooccurrenceSpec::parse(&text)?;
            if let Some(k) = classes {
                if k != spec.classes.len() {
                    bail!(
                        "--classes {k} disagrees with spec file ({} classes)",
                        spec.classes.len()
                    );
                }
            }
            spec
        }
        None => CooccurrenceSpec::default_for(classes.unwrap_or(4))?,
    };
    let manifest = dataio::synth_dataset(&spec, samples, seed, image_size, out)?;
    println!(
        "wrote {samples} samples ({} classes: {}) at {image_size}x{image_size}",
        spec.classes.len(),
        spec.classes.join(",")
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn strengths_from_manifest(path: &Path, add_other: bool) -> Result<StrengthTable> {
    let manifest = load_manifest(path)?;
    let mut classes = manifest.classes.clone();
    if add_other {
        classes.push("other".to_string());
    }
    let rows = manifest
        .rows
        .iter()
        .map(|r| {
            let mut s = r.strengths.clone();
            if add_other {
                s.push(if r.strengths.iter().all(|&v| v < 0.5) { 1.0 } else { 0.0 });
            }
            s
        })
        .collect();
    Ok(StrengthTable::new(classes, rows)?)
}

pub fn analyze(manifest: &Path, add_other: bool, out_dir: Option<&Path>) -> Result<()> {
    let table = strengths_from_manifest(manifest, add_other)?;
    let report = cooccur::analyze(&table)?;
    let k = report.classes.len();

    println!("samples: {}", report.stats.total);
    let counts: Vec<String> = report
        .classes
        .iter()
        .zip(&report.stats.per_class)
        .map(|(c, n)| format!("{c}={n}"))
        .collect();
    println!(
        "counts: {} | >1 label={} | total={}",
        counts.join(" "),
        report.stats.multi_label,
        report.stats.total
    );

    let mut matrix_csv = String::from("class");
    for c in &report.classes {
        matrix_csv.push(',');
        matrix_csv.push_str(c);
    }
    matrix_csv.push('\n');
    for i in 0..k {
        matrix_csv.push_str(&report.classes[i]);
        for j in 0..k {
            matrix_csv.push(',');
            matrix_csv.push_str(&report.r(i, j).to_string());
        }
        matrix_csv.push('\n');
    }
    println!("co-occurrence matrix R(i,j):");
    print!("{matrix_csv}");

    let influence: Vec<String> = report
        .classes
        .iter()
        .zip(&report.influence)
        .map(|(c, r)| format!("{c}={r}"))
        .collect();
    println!("influence: {}", influence.join(" "));
    let order_names: Vec<&str> = report.order.iter().map(|&i| report.classes[i].as_str()).collect();
    println!("order: {}", order_names.join(" -> "));

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("cooccurrence.csv"), &matrix_csv)?;
        let mut inf = String::from("class,influence\n");
        for (c, r) in report.classes.iter().zip(&report.influence) {
            inf.push_str(&format!("{c},{r}\n"));
        }
        std::fs::write(dir.join("influence.csv"), inf)?;
        let mut stats = String::from("class,count\n");
        for (c, n) in report.classes.iter().zip(&report.stats.per_class) {
            stats.push_str(&format!("{c},{n}\n"));
        }
        stats.push_str(&format!(">1 label,{}\n", report.stats.multi_label));
        stats.push_str(&format!("total,{}\n", report.stats.total));
        std::fs::write(dir.join("stats.csv"), stats)?;
        println!("reports written to {}", dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    manifest: &Path,
    val_manifest: &Path,
    out: &Path,
    stage: &str,
    order_arg: &str,
    config: Option<&Path>,
    desk: bool,
    seed: Option<u64>,
    add_other: bool,
    init: Option<&Path>,
    log_base: Option<&Path>,
    finetune_all: bool,
) -> Result<()> {
    let mut settings = if desk {
        TrainSettings::desk()
    } else {
        TrainSettings::default()
    };
    if let Some(cfg_path) = config {
        let text = std::fs::read_to_string(cfg_path)
            .with_context(|| format!("reading config {}", cfg_path.display()))?;
        settings
            .apply_config_text(&text)
            .with_context(|| format!("config {}", cfg_path.display()))?;
    }
    if let Some(s) = seed {
        settings.tc.seed = s;
    }
    if finetune_all {
        settings.finetune_all = true;
    }
    settings.backbone.validate()?;
    settings.tc.validate()?;

    println!(
        "loading datasets ({} / {})",
        manifest.display(),
        val_manifest.display()
    );
    let train_set: Dataset<f32> = load_dataset(manifest, settings.backbone.pre_size, add_other)?;
    let val_set: Dataset<f32> = load_dataset(val_manifest, settings.backbone.pre_size, add_other)?;
    if train_set.classes != val_set.classes {
        bail!(
            "class mismatch between train ({}) and validation ({})",
            train_set.classes.join(","),
            val_set.classes.join(",")
        );
    }

    let order = resolve_order(order_arg, &train_set)?;
    println!(
        "label order: {}",
        order.names(&train_set.classes).join(" -> ")
    );

    let log_stem = log_base
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.to_path_buf());
    let stage1_log = log_stem.with_extension("stage1.csv");
    let stage2_log = log_stem.with_extension("stage2.csv");

    match stage {
        "1" => {
            let params = run_stage1(&train_set, &val_set, &settings, &stage1_log)?;
            let ckpt = backbone_to_checkpoint(&params, &settings.backbone, &train_set.classes);
            save_checkpoint(&ckpt, out)?;
            println!("saved stage-1 checkpoint to {}", out.display());
        }
        "2" => {
            let init_path = init.context("--stage 2 needs --init with a stage-1 checkpoint")?;
            let (backbone, bc, classes) = backbone_from_checkpoint(&load_checkpoint(init_path)?)?;
            if classes != train_set.classes {
                bail!(
                    "checkpoint classes ({}) do not match dataset ({})",
                    classes.join(","),
                    train_set.classes.join(",")
                );
            }
            settings.backbone = bc;
            let model = run_stage2(&train_set, &val_set, &settings, backbone, order, &stage2_log)?;
            save_checkpoint(&model_to_checkpoint(&model), out)?;
            println!("saved checkpoint to {}", out.display());
        }
        "both" => {
            let params = run_stage1(&train_set, &val_set, &settings, &stage1_log)?;
            let model = run_stage2(&train_set, &val_set, &settings, params, order, &stage2_log)?;
            save_checkpoint(&model_to_checkpoint(&model), out)?;
            println!("saved checkpoint to {}", out.display());
        }
        other => bail!("unknown --stage '{other}', expected 1, 2, or both"),
    }
    Ok(())
}

fn resolve_order(order_arg: &str, train_set: &Dataset<f32>) -> Result<LabelOrder> {
    if order_arg == "auto" {
        let table = train_set.strength_table()?;
        let report = cooccur::analyze(&table)?;
        Ok(LabelOrder::new(report.order)?)
    } else {
        let names: Vec<&str> = order_arg.split(',').map(str::trim).collect();
        Ok(LabelOrder::from_names(&names, &train_set.classes)?)
    }
}

fn print_epochs(logs: &[trainer::EpochLog]) {
    if let Some(last) = logs.last() {
        println!(
            "epoch {:>3}: train {:.4} val {:.4} lr {:.2e} ({} ms)",
            last.epoch, last.train_loss, last.val_loss, last.lr, last.wall_ms
        );
    }
}

fn run_stage1(
    train_set: &Dataset<f32>,
    val_set: &Dataset<f32>,
    settings: &TrainSettings,
    log_path: &Path,
) -> Result<wxnn_core::backbone::BackboneParams<f32>> {
    println!("stage 1: backbone + multi-label head");
    let tc = TrainConfig {
        max_epochs: settings.epochs_stage1,
        ..settings.tc.clone()
    };
    let (params, logs) = trainer::train_stage1(train_set, val_set, &settings.backbone, &tc)?;
    print_epochs(&logs);
    std::fs::write(log_path, log_csv(&logs))
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!("stage-1 log: {}", log_path.display());
    Ok(params)
}

fn run_stage2(
    train_set: &Dataset<f32>,
    val_set: &Dataset<f32>,
    settings: &TrainSettings,
    backbone: wxnn_core::backbone::BackboneParams<f32>,
    order: LabelOrder,
    log_path: &Path,
) -> Result<WeatherModel<f32>> {
    println!("stage 2: attention + ConvLSTM + heads (backbone frozen)");
    let tc = TrainConfig {
        max_epochs: settings.epochs_stage2,
        ..settings.tc.clone()
    };
    let opts = Stage2Options {
        kernel: settings.kernel,
        attention_mid: settings.attention_mid,
        finetune_all: settings.finetune_all,
        ..Stage2Options::default()
    };
    let (model, logs) = trainer::train_stage2(
        train_set,
        val_set,
        &settings.backbone,
        backbone,
        order,
        &opts,
        &tc,
    )?;
    print_epochs(&logs);
    std::fs::write(log_path, log_csv(&logs))
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!("stage-2 log: {}", log_path.display());
    Ok(model)
}

fn load_eval_dataset(manifest: &Path, model: &WeatherModel<f32>) -> Result<Dataset<f32>> {
    let manifest_classes = load_manifest(manifest)?.classes;
    let n = model.class_names.len();
    let add_other = n == manifest_classes.len() + 1
        && model.class_names.last().map(String::as_str) == Some("other")
        && model.class_names[..n - 1] == manifest_classes[..];
    if !add_other && model.class_names != manifest_classes {
        bail!(
            "manifest classes ({}) do not match model ({})",
            manifest_classes.join(","),
            model.class_names.join(",")
        );
    }
    Ok(load_dataset(
        manifest,
        model.backbone_cfg.pre_size,
        add_other,
    )?)
}

/// Predicted label matrix over a dataset, center-cropped eval path.
pub fn predict_matrix(model: &WeatherModel<f32>, data: &Dataset<f32>) -> Result<LabelMatrix> {
    let rows: Vec<Vec<u8>> = data
        .samples
        .par_iter()
        .map(|s| -> Result<Vec<u8>> {
            let img = trainer::center_crop(&s.image, model.backbone_cfg.input_size)?;
            Ok(predict_labels(model, &img)?.labels)
        })
        .collect::<Result<_>>()?;
    Ok(LabelMatrix::from_rows(&rows)?)
}

fn metric_csv(report: &MetricReport, classes: &[String]) -> String {
    let mut header = String::new();
    let mut row = String::new();
    for (c, (p, r)) in classes.iter().zip(&report.per_class) {
        header.push_str(c);
        header.push(',');
        row.push_str(&format!("{p:.4}/{r:.4},"));
    }
    header.push_str("AP,AR,AF1,OP,OR,OF1");
    row.push_str(&format!(
        "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
        report.ap, report.ar, report.af1, report.op, report.or, report.of1
    ));
    format!("{header}\n{row}\n")
}

pub fn eval(manifest: &Path, ckpt: &Path, or_mode: &str, out: Option<&Path>) -> Result<()> {
    let mode = OrMode::parse(or_mode)?;
    let model = model_from_checkpoint(&load_checkpoint(ckpt)?)?;
    let data = load_eval_dataset(manifest, &model)?;
    if data.is_empty() {
        bail!("evaluation dataset is empty");
    }
    let truth = data.label_matrix()?;
    let pred = predict_matrix(&model, &data)?;
    let report = metrics::report(&truth, &pred, mode)?;
    let csv = metric_csv(&report, &model.class_names);
    println!("OR mode: {}", mode.as_str());
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

pub fn gradcheck(module: &str, seed: u64) -> Result<i32> {
    let checks = wxnn_core::gradcheck::run_module(module, seed)?;
    let mut all_pass = true;
    for c in &checks {
        println!("{}", c.line());
        all_pass &= c.pass;
    }
    Ok(if all_pass { 0 } else { 1 })
}

pub fn predict(image: &Path, ckpt: &Path, dump_attention: Option<&Path>) -> Result<()> {
    let model = model_from_checkpoint(&load_checkpoint(ckpt)?)?;
    let bc = &model.backbone_cfg;
    let decoded = dataio::decode_image(image)?;
    let pre = if bc.pre_size == decoded.shape()[0] {
        decoded
    } else {
        dataio::resize_bilinear(&decoded, bc.pre_size, bc.pre_size)
    };
    let input = trainer::center_crop(&pre.cast::<f32>(), bc.input_size)?;
    let prediction = predict_labels(&model, &input)?;

    println!("class,probability,label");
    for (i, name) in model.class_names.iter().enumerate() {
        println!(
            "{name},{:.6},{}",
            prediction.probs[i], prediction.labels[i]
        );
    }

    if let Some(path) = dump_attention {
        let mut csv = String::from("step,class");
        let c = prediction.step_attention.first().map_or(0, Vec::len);
        for k in 0..c {
            csv.push_str(&format!(",z{k}"));
        }
        csv.push('\n');
        for (t, z) in prediction.step_attention.iter().enumerate() {
            csv.push_str(&format!(
                "{t},{}",
                model.class_names[model.order.at(t)]
            ));
            for v in z {
                csv.push_str(&format!(",{v:.6}"));
            }
            csv.push('\n');
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        println!("attention dump written to {}", path.display());
    }
    Ok(())
}
