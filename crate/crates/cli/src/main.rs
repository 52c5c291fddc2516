//! `stenosis`: synthetic data, tracking, toy training, evaluation and the
//! annotation service behind one command.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "stenosis", version, about = "Stenosis detection toolkit for angiography sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    /// TOML file with per-module overrides ([synth], [tracker], [schedule], [nms]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of angiography sequences.
    Synth(commands::SynthArgs),
    /// Propagate reference-frame boxes through every sequence with the tracker.
    Propagate(commands::PropagateArgs),
    /// Train the toy pyramid detector on annotated frames.
    TrainDetector(commands::TrainDetectorArgs),
    /// Train the toy view classifier (RCA/LCA) with the two-phase schedule.
    TrainClassifier(commands::TrainClassifierArgs),
    /// Run a trained detector over a dataset and write a detections file.
    Detect(commands::DetectArgs),
    /// Score a detections file against the dataset annotations.
    EvalDet(commands::EvalDetArgs),
    /// Score a trained view classifier.
    EvalCls(commands::EvalClsArgs),
    /// Write Grad-CAM overlays for the view classifier.
    Gradcam(commands::GradcamArgs),
    /// Start the annotation-review HTTP service.
    Serve(commands::ServeArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Propagate(a) => commands::propagate(a),
        Command::TrainDetector(a) => commands::train_detector(a),
        Command::TrainClassifier(a) => commands::train_classifier(a),
        Command::Detect(a) => commands::detect(a),
        Command::EvalDet(a) => commands::eval_det(a),
        Command::EvalCls(a) => commands::eval_cls(a),
        Command::Gradcam(a) => commands::gradcam(a),
        Command::Serve(a) => commands::serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here too and are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
