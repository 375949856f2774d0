//! `dsd`: detect, evaluate and render dissimilar spans between sentence pairs.

mod commands;
mod config;
mod render;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use config::{RunConfig, Settings};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "dsd", version, about = "Dissimilar span detection between sentence pairs")]
struct Cli {
    /// TOML file with defaults for any of the global options
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mark dissimilar spans on each input pair (TSV: two sentences, or an annotated record)
    Annotate {
        /// Input file; stdin when omitted or `-`
        input: Option<PathBuf>,
    },
    /// Score a method against an annotated dataset
    Evaluate { dataset: PathBuf },
    /// Evaluate a thresholded method over several thresholds
    Sweep {
        dataset: PathBuf,
        /// Comma-separated thresholds (default 0 to 0.03 in steps of 0.001)
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        grid: Vec<f64>,
    },
    /// Paraphrase accuracy with and without the span gate
    Paraphrase {
        /// Labeled test pairs (id, sentence1, sentence2, label)
        #[arg(long)]
        test: PathBuf,
        /// Labeled pairs used to tune both thresholds
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        sts_threshold: Option<f64>,
        #[arg(long)]
        dsd_threshold: Option<f64>,
        /// The files have no header row
        #[arg(long)]
        no_header: bool,
    },
    /// Dataset counts and length statistics
    Stats { dataset: PathBuf },
    /// Write sentence-2 tokens with BIO tags
    ExportBio {
        dataset: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Re-render `annotate --format json-lines` output
    Render { input: Option<PathBuf> },
}

fn env_var(k: &str) -> Option<String> {
    std::env::var(k).ok().filter(|v| !v.is_empty())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    let settings = cli.settings.over(file).over(Settings::from_env(env_var)?);
    let cfg = RunConfig::resolve(settings)?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    commands::run(&cli.command, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
