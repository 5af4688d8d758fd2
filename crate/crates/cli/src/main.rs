mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_layers, Layers};

const OVERRIDE_HELP: &str = "Any configuration key can be set as `--key value` after the options \
above; command-line values take precedence over the config file, which takes precedence over \
defaults. Unknown keys are rejected.";

#[derive(Parser)]
#[command(
    name = "dadloc",
    version,
    about = "Fingerprint localization with dynamic adversarial adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source, target and query datasets.
    Simulate(RunArgs),
    /// Train a model on a labeled source and an unlabeled target dataset.
    Train(RunArgs),
    /// Evaluate a checkpoint on a labeled query dataset.
    Eval(RunArgs),
    /// Train and evaluate all ablation arms.
    Ablate(RunArgs),
    /// Check every layer's gradient against finite differences.
    Gradcheck(RunArgs),
}

#[derive(Args)]
#[command(after_help = OVERRIDE_HELP)]
struct RunArgs {
    /// JSON file with configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

impl RunArgs {
    fn layers(&self) -> anyhow::Result<Layers> {
        let mut layers = parse_layers(&self.overrides)?;
        if let Some(path) = &self.config {
            anyhow::ensure!(layers.file.is_none(), "--config given twice");
            layers.file = Some(path.clone());
        }
        Ok(layers)
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a.layers()?).map(|_| true),
        Command::Train(a) => commands::train_cmd(&a.layers()?).map(|_| true),
        Command::Eval(a) => commands::eval_cmd(&a.layers()?).map(|_| true),
        Command::Ablate(a) => commands::ablate_cmd(&a.layers()?).map(|_| true),
        Command::Gradcheck(a) => commands::gradcheck_cmd(&a.layers()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
