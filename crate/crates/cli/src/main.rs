//! `cqr`: prompt-guided conversational query rewriting, end to end. One JSON
//! configuration file names the dataset, the prompt settings, the rewriting
//! backend, and the evaluation inputs; subcommands run the stages.
//!
//! Exit codes: 0 on success, 1 when the configuration or its referenced
//! files fail validation, 2 when a command fails at runtime.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::Overrides;

#[derive(Parser)]
#[command(
    name = "cqr",
    version,
    about = "Conversational query rewriting: prompt assembly, LLM rewriting, and retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides the config)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random seed (overrides the config)
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads for rewriting (overrides the config)
    #[arg(long, value_name = "INT")]
    parallelism: Option<usize>,
    /// Backend kind override: identity | concat | replay | http_chat
    #[arg(long, value_name = "NAME")]
    backend: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            parallelism: self.parallelism,
            backend: self.backend.clone(),
        }
    }

    fn load(&self) -> Result<config::Config, CliError> {
        config::load_config(&self.config, &self.overrides()).map_err(CliError::Validation)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and every referenced file
    Validate(CommonArgs),
    /// Generate one rewrite per instance and write rewrites.jsonl
    Rewrite {
        #[command(flatten)]
        common: CommonArgs,
        /// In-context example count for this run (overrides the config)
        #[arg(long, value_name = "INT")]
        shots: Option<usize>,
    },
    /// Score a rewrites file and write report.txt, report.json, scores.tsv
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Rewrites file to score (default: <output_dir>/rewrites.jsonl)
        #[arg(long, value_name = "PATH")]
        rewrites: Option<PathBuf>,
        /// Label the report rows with this shot count
        #[arg(long, value_name = "INT")]
        shots: Option<usize>,
        /// Label ellipticity with the lexical heuristic instead of annotations
        #[arg(long)]
        heuristic_ellipticity: bool,
    },
    /// Rerun rewriting and evaluation once per configured shot count
    Ablate(CommonArgs),
    /// Export blinded pairwise comparisons between two rewrite files
    ExportPairwise {
        #[command(flatten)]
        common: CommonArgs,
        /// Rewrites file for the first system
        #[arg(long, value_name = "PATH")]
        rewrites_a: PathBuf,
        /// Rewrites file for the second system
        #[arg(long, value_name = "PATH")]
        rewrites_b: PathBuf,
        /// Items to sample (overrides the config)
        #[arg(long, value_name = "INT")]
        sample_size: Option<usize>,
    },
    /// Re-render the text report from a scores.tsv file
    Report {
        /// Scores file produced by evaluate or ablate
        #[arg(long, value_name = "PATH")]
        scores: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate(common) => commands::cmd_validate(&common.config, &common.overrides()),
        Command::Rewrite { common, shots } => {
            let config = common.load()?;
            commands::cmd_rewrite(&config, shots).map_err(CliError::from)
        }
        Command::Evaluate {
            common,
            rewrites,
            shots,
            heuristic_ellipticity,
        } => {
            let config = common.load()?;
            commands::cmd_evaluate(&config, rewrites, shots, heuristic_ellipticity)
                .map_err(CliError::from)
        }
        Command::Ablate(common) => {
            let config = common.load()?;
            commands::cmd_ablate(&config).map_err(CliError::from)
        }
        Command::ExportPairwise {
            common,
            rewrites_a,
            rewrites_b,
            sample_size,
        } => {
            let config = common.load()?;
            commands::cmd_export_pairwise(&config, &rewrites_a, &rewrites_b, sample_size)
                .map_err(CliError::from)
        }
        Command::Report { scores } => commands::cmd_report(&scores).map_err(CliError::from),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(violations)) => {
            for violation in &violations {
                eprintln!("error: {violation}");
            }
            eprintln!("{} error(s)", violations.len());
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
