//! `asap`: dataset generation, training, evaluation and audits for the
//! segmentation network.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "asap", version, about = "Real-time semantic segmentation on synthetic street scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `section.key=value` overrides, shared by every verb
/// that builds a network.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.base_lr=0.02`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(commands::GenArgs),
    /// Train a network, writing config echo, trace and checkpoint.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint: per-class IoU and mIoU.
    Eval(commands::EvalArgs),
    /// Train several variants under one config and compare them.
    Ablate(commands::AblateArgs),
    /// Analytic flop report and module cost comparison.
    Flops(commands::FlopsArgs),
    /// Whole-model finite-difference gradient audit.
    Gradcheck(commands::GradcheckArgs),
    /// Forward latency, input resize included.
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Flops(a) => commands::flops(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
