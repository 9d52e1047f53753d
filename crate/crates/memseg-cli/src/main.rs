//! Command-line driver for dataset generation, training, inference,
//! evaluation and ensembling.

mod commands;
mod config;

use clap::{Parser, Subcommand};

use memseg::Error as MemsegError;

/// Memory-augmented video semantic segmentation experiments.
#[derive(Parser)]
#[command(name = "memseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes video dataset.
    GenData(commands::GenDataArgs),
    /// Train a model variant on a dataset.
    Train(commands::TrainArgs),
    /// Run (multi-stage, multi-scale) inference and save masks.
    Infer(commands::InferArgs),
    /// Evaluate saved masks against ground truth.
    Eval(commands::EvalArgs),
    /// Ensemble two saved probability-map sets.
    Ensemble(commands::EnsembleArgs),
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MEMSEG_LOG"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Infer(args) => commands::infer(args),
        Command::Eval(args) => commands::eval(args),
        Command::Ensemble(args) => commands::ensemble(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::from(classify(&err))
        }
    }
}

/// 2 for user/config mistakes, 1 for internal failures.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<MemsegError>() {
            return match e {
                MemsegError::Config(_)
                | MemsegError::Input(_)
                | MemsegError::Manifest(_)
                | MemsegError::Io { .. }
                | MemsegError::Format { .. } => 2,
                MemsegError::Shape(_) | MemsegError::State(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}
