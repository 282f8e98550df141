//! `semfuse`: synthesis, training, fusion, evaluation and ablation.
//!
//! Exit codes: 0 success, 1 contract violation or run failure, 2 usage
//! error (bad flags, bad configuration).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "semfuse",
    version,
    about = "Semantic-driven infrared/visible image fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads the run configuration.
#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Run configuration file ([model], [train], [data], [eval] sections).
    #[arg(long, env = "SEMFUSE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override one key, `section.key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Warm,
    Semantic,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset under OUT/{train,val,test}.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training images (overrides data.images).
        #[arg(long)]
        images: Option<usize>,
        /// Validation images (overrides data.val_images).
        #[arg(long)]
        val_images: Option<usize>,
        /// Test images (overrides data.test_images).
        #[arg(long)]
        test_images: Option<usize>,
        /// Square image side (overrides data.size).
        #[arg(long)]
        size: Option<usize>,
        /// Generator seed (overrides data.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Glare probability (overrides data.glare_probability).
        #[arg(long)]
        glare: Option<f64>,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the warm-start phase, the semantic phase, or both.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        /// Checkpoint to start the semantic phase from.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Dataset root (overrides data.root).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse every pair under INPUT_DIR/{ir,vis} into 8-bit PNGs.
    Fuse {
        /// Fusion or joint checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Directory holding ir/ and vis/.
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Reattach the visible chrominance and write RGB.
        #[arg(long, default_value_t = false)]
        color: bool,
    },
    /// Score fused images against their sources and, with a segmentation
    /// model, against the labels.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of fused PNGs named by pair id.
        #[arg(long)]
        fused_dir: PathBuf,
        /// Split directory holding ir/, vis/ and optionally labels/.
        #[arg(long)]
        dataset: PathBuf,
        /// Joint checkpoint whose segmentation net scores the fused images.
        #[arg(long)]
        seg_model: Option<PathBuf>,
        /// Output directory for the report and curve CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every row of an ablation plan.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `default` or a plan file (`name | key=value ...` per line).
        #[arg(long, default_value = "default")]
        plan: String,
        /// Dataset root (overrides data.root).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Contract(String),
}

impl From<semfuse::Error> for Failure {
    fn from(e: semfuse::Error) -> Self {
        match e {
            semfuse::Error::Config(_) | semfuse::Error::PhaseOrder(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Contract(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Contract(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth {
            config,
            images,
            val_images,
            test_images,
            size,
            seed,
            glare,
            out,
        } => commands::synth(
            &config,
            images,
            val_images,
            test_images,
            size,
            seed,
            glare,
            &out,
        ),
        Command::Train {
            config,
            phase,
            init_from,
            data,
            out,
        } => commands::train(&config, phase, init_from.as_deref(), data, &out),
        Command::Fuse {
            model,
            input_dir,
            out_dir,
            color,
        } => commands::fuse(&model, &input_dir, &out_dir, color),
        Command::Eval {
            config,
            fused_dir,
            dataset,
            seg_model,
            out,
        } => commands::eval(&config, &fused_dir, &dataset, seg_model.as_deref(), &out),
        Command::Ablate {
            config,
            plan,
            data,
            out,
        } => commands::ablate(&config, &plan, data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Contract(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
