//! `patlm`: run the pattern mining and language modelling pipeline stage by stage.

mod config;
mod failure;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "patlm", version, about = "Pattern-based subword language modelling pipeline")]
struct Cli {
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set mine.f=50` or `--set lm.d_LM=64`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic morphology corpus.
    Synth,
    /// Mine frequent substrings of the training split and reduce them to candidate patterns.
    Mine,
    /// Fit the L1-regularized pattern CRF and select patterns.
    TrainCrf,
    /// Build the prefix-state automaton of the selected patterns.
    BuildAutomaton,
    /// Encode all splits as characters or pattern states.
    Encode,
    /// Train a language model on the encoded training split.
    TrainLm,
    /// Report perplexity of a checkpoint.
    EvalLm,
    /// Dump highway transform gate values.
    DiagGates,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let loaded = config::load(cli.config.as_deref(), &cli.overrides)?;
    if loaded.config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(loaded.config.threads)
            .build_global()
            .map_err(|e| Failure::config(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Synth => stages::synth(&loaded),
        Command::Mine => stages::mine(&loaded),
        Command::TrainCrf => stages::train_crf_stage(&loaded),
        Command::BuildAutomaton => stages::build_automaton_stage(&loaded),
        Command::Encode => stages::encode(&loaded),
        Command::TrainLm => stages::train_lm(&loaded),
        Command::EvalLm => stages::eval_lm(&loaded),
        Command::DiagGates => stages::diag_gates(&loaded),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::config(e.to_string().lines().next().unwrap_or_default().to_string());
            eprintln!("{f}");
            return ExitCode::from(f.code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code as u8)
        }
    }
}
