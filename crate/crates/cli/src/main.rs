//! `afdnet` command-line runs: base training, fine-tuning, evaluation,
//! fusion-weight inspection and ablation grids.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid configuration or usage,
//! 3 numeric abort during training, 4 unreadable or mismatched checkpoint.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "afdnet", version, about = "Few-shot detection on a synthetic shapes world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on base classes from a fresh initialization.
    TrainBase(commands::TrainBaseArgs),
    /// Fine-tune a checkpoint on base and novel classes with K shots each.
    Finetune(commands::FinetuneArgs),
    /// AP50 of a checkpoint over repeated sets of held-out scenes.
    Eval(commands::EvalArgs),
    /// Extract the four fusion-weight series from a training log.
    InspectWeights(commands::InspectArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBase(a) => commands::train_base(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::InspectWeights(a) => commands::inspect_weights(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}
