//! `pmad`: preprocessing, synthetic data, training, evaluation and Grad-CAM
//! for the lesion segmentation and classification networks.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pmad", version, about = "Breast-ultrasound lesion segmentation and classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Width/depth preset
    #[arg(long, global = true, value_parser = ["tiny", "paper"])]
    pub profile: Option<String>,
    /// Dataset in BUSI layout (<class>/<id>.png with <id>_mask*.png)
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Seg,
    Cls,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the preprocessing pipeline on one image or a whole dataset
    Preprocess {
        /// Single image instead of --data-dir
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write every intermediate stage as 01_gamma.png .. 04_normalized.png
        #[arg(long)]
        dump_stages: Option<PathBuf>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Write a synthetic dataset in BUSI layout
    SynthData {
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the segmentation network
    TrainSeg,
    /// Train the classifier on masked inputs
    TrainCls,
    /// Segmentation metrics of a checkpoint on a dataset
    EvalSeg,
    /// Classification metrics of a checkpoint on a dataset
    EvalCls,
    /// Predict a lesion mask for one image
    Segment {
        #[arg(long)]
        input: PathBuf,
    },
    /// Predict the class of one masked image
    Classify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Grad-CAM heatmap of a checkpoint for one image
    Gradcam {
        #[arg(long)]
        input: PathBuf,
        /// Segmentation: score region (default: whole image). Classifier: input mask (required).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
        /// Classifier target class (default: predicted)
        #[arg(long)]
        class: Option<String>,
    },
    /// Finite-difference gradient checks of every primitive and module
    Gradcheck {
        /// Also check both whole networks (tiny profile only)
        #[arg(long)]
        network: bool,
    },
    /// Print the wiring descriptor of a network
    PrintArch {
        #[arg(long, value_enum, default_value = "seg")]
        model: ModelKind,
    },
}

fn run(command: Command, common: &Common) -> Result<(), CliError> {
    use commands as c;
    match command {
        Command::Preprocess {
            input,
            dump_stages,
            height,
            width,
        } => c::preprocess(common, input, dump_stages, height, width),
        Command::SynthData { n_per_class, size } => c::synth_data(common, n_per_class, size),
        Command::TrainSeg => c::train_seg(common),
        Command::TrainCls => c::train_cls(common),
        Command::EvalSeg => c::eval_seg(common),
        Command::EvalCls => c::eval_cls(common),
        Command::Segment { input } => c::segment(common, &input),
        Command::Classify { input, mask } => c::classify(common, &input, &mask),
        Command::Gradcam {
            input,
            mask,
            layer,
            class,
        } => c::gradcam(common, &input, mask.as_deref(), layer, class),
        Command::Gradcheck { network } => c::gradcheck(common, network),
        Command::PrintArch { model } => c::print_arch(common, model),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("usage: pmad <COMMAND> [--config <path>] [--seed <n>] [--profile tiny|paper] [--data-dir <dir>] [--out <path>] [--checkpoint <path>]");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
