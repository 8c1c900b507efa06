//! `cerse`: simulate corpora, train, enhance and evaluate.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 non-finite loss,
//! 4 recognizer failure.

mod commands;
mod config;
mod data;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cerse_core::Error as CoreError;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cerse", version, about = "CER-driven speech enhancement")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for corpus simulation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint to continue training from.
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    /// Write noisy/enhanced/clean spectrogram images.
    #[arg(long, global = true)]
    pub dump_spectrograms: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mix speech with noise into a corpus of noisy/clean pairs.
    Simulate,
    /// Train the SE model and the CER estimator on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus scored after every epoch.
        #[arg(long)]
        val_corpus: Option<PathBuf>,
    },
    /// Enhance WAV files with a trained checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score noisy and enhanced audio of a corpus with the recognizer.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Run the mock recognizer over a directory of WAVs, writing
    /// `id<TAB>text` lines; usable as an external recognizer command.
    Recognize { input: PathBuf, output: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<CoreError>());
    match core {
        Some(CoreError::NonFiniteLoss { .. }) => 3,
        Some(CoreError::Recognizer(_) | CoreError::RecognizerTimeout(_) | CoreError::MalformedOutput(_)) => 4,
        _ => 2,
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(g.seed);
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Simulate => commands::simulate(&load_config(g)?, g),
        Command::Train { corpus, val_corpus } => commands::train(&load_config(g)?, g, &corpus, val_corpus.as_deref()),
        Command::Enhance { checkpoint, inputs } => commands::enhance(g, &checkpoint, &inputs),
        Command::Evaluate { checkpoint, corpus } => commands::evaluate(&load_config(g)?, g, &checkpoint, &corpus),
        Command::Recognize { input, output } => commands::recognize(&load_config(g)?, &input, &output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
