//! `wxnn` — train, evaluate, and inspect the multi-label weather
//! recognizer from the command line.

mod commands;
mod settings;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "wxnn",
    version,
    about = "Multi-label weather recognition: ConvLSTM with channel-wise attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted co-occurrence mixture.
    Synth {
        /// Output directory for images and manifest.csv
        #[arg(long)]
        out: PathBuf,
        /// Number of classes (ignored when --spec is given)
        #[arg(long)]
        classes: Option<usize>,
        /// Number of samples to generate
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mixture spec file (see README for the format)
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Square side of generated images
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
    /// Print co-occurrence matrix, influence ranking, label order, and
    /// dataset statistics for a manifest.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        /// Append an 'other' class for samples with no strength >= 0.5
        #[arg(long)]
        add_other: bool,
        /// Also write cooccurrence.csv / influence.csv / stats.csv here
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Two-stage training; writes a checkpoint and per-epoch CSV logs.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Validation manifest
        #[arg(long)]
        val: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// 1, 2, or both
        #[arg(long, default_value = "both")]
        stage: String,
        /// "auto" (co-occurrence ranking on the training split) or a
        /// comma-separated class-name list
        #[arg(long, default_value = "auto")]
        order: String,
        /// key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Small backbone (8,16,32,64,64) with 64x64 inputs
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Append an 'other' class (for datasets annotated that way)
        #[arg(long)]
        add_other: bool,
        /// Stage-1 checkpoint to start from (required with --stage 2)
        #[arg(long)]
        init: Option<PathBuf>,
        /// Base path for the per-epoch logs (default: the checkpoint path)
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also update the backbone during stage 2
        #[arg(long)]
        finetune_all: bool,
    },
    /// Evaluate a checkpoint against a labeled manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Overall-recall numerator: "tp" or "literal"
        #[arg(long, default_value = "tp")]
        or_mode: String,
        /// Write the metric CSV here as well
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient verification; exit 0 iff all pass.
    Gradcheck {
        /// tensors | cells | attention | model | all
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-class probabilities and labels for one image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Write per-step attention weights (CSV, one row per step)
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            out,
            classes,
            samples,
            seed,
            spec,
            image_size,
        } => commands::synth(&out, classes, samples, seed, spec.as_deref(), image_size).map(|()| 0),
        Command::Analyze {
            manifest,
            add_other,
            out_dir,
        } => commands::analyze(&manifest, add_other, out_dir.as_deref()).map(|()| 0),
        Command::Train {
            manifest,
            val,
            out,
            stage,
            order,
            config,
            desk,
            seed,
            add_other,
            init,
            log,
            finetune_all,
        } => commands::train(
            &manifest,
            &val,
            &out,
            &stage,
            &order,
            config.as_deref(),
            desk,
            seed,
            add_other,
            init.as_deref(),
            log.as_deref(),
            finetune_all,
        )
        .map(|()| 0),
        Command::Eval {
            manifest,
            ckpt,
            or_mode,
            out,
        } => commands::eval(&manifest, &ckpt, &or_mode, out.as_deref()).map(|()| 0),
        Command::Gradcheck { module, seed } => commands::gradcheck(&module, seed),
        Command::Predict {
            image,
            ckpt,
            dump_attention,
        } => commands::predict(&image, &ckpt, dump_attention.as_deref()).map(|()| 0),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
