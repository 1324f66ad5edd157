use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unlearn_cli::commands::{self, emit};
use unlearn_cli::config::{ConfigError, RunConfig};
use unlearn_cli::error::CliError;
use unlearn_cli::pipeline::TrainSplit;

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Synthetic-corpus unlearning experiments on a toy language model")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set unlearn.learning_rate=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (else $UNLEARN_OUTPUT_ROOT, else ./unlearn-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Full,
    Retain,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and the forget/retain split.
    GenData,
    /// Fine-tune a fresh model with cross-entropy.
    Finetune {
        #[arg(long, value_enum, default_value = "full")]
        split: SplitArg,
    },
    /// Unlearn the forget split from the full fine-tuned model.
    Unlearn {
        /// ceu, general_ceu, grad_ascent or cross_entropy; defaults to unlearn.objective.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Evaluate a checkpoint on every split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write gradient-magnitude and GRPO/DPO coefficient tables.
    GradReport {
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
            path: p.display().to_string(),
            source,
        })?),
        None => None,
    };
    let mut overrides = cli.overrides.clone();
    if let Command::Unlearn { objective: Some(o) } = &cli.command {
        overrides.push(format!("unlearn.objective={o:?}"));
    }
    let cfg = RunConfig::load(text.as_deref(), &overrides)?;
    let root = commands::output_root(cli.out.clone());
    match cli.command {
        Command::ShowConfig => Ok(commands::show_config(&cfg)),
        Command::GenData => commands::gen_data(&root, &cfg),
        Command::Finetune { split } => {
            let which = match split {
                SplitArg::Full => TrainSplit::Full,
                SplitArg::Retain => TrainSplit::Retain,
            };
            commands::finetune_cmd(&root, &cfg, which)
        }
        Command::Unlearn { .. } => commands::unlearn_cmd(&root, &cfg, &cfg.objective()?),
        Command::Eval { checkpoint } => commands::eval_cmd(&root, &cfg, &checkpoint),
        Command::GradReport { points } => commands::grad_report(&root, &cfg, points),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            emit(&msg);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
