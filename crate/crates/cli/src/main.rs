//! `muser` command-line entry point.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use muser::config::Preset;
use muser::MuserError;

#[derive(Debug, Parser)]
#[command(name = "muser", version, about = "Emotion-conditioned symbolic music VQ-VAE toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random choice made by the run; defaults to the
    /// config's `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base hyperparameters when no config file is given (paper|desk).
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Where to write the run manifest. Defaults to `<out>.manifest.json`,
    /// or `muser-<command>.manifest.json` for commands without `--out`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Converts MIDI to a CP event stream, or an event stream back to MIDI.
    Tokenize(commands::TokenizeArgs),
    /// Trains the VQ-VAE.
    Train(commands::TrainArgs),
    /// Trains the emotion-conditioned prior over a trained model's codes.
    TrainPrior(commands::TrainPriorArgs),
    /// Samples a new piece for an emotion.
    Generate(commands::GenerateArgs),
    /// Moves element latents from piece B into piece A.
    Transfer(commands::TransferArgs),
    /// PR/NPC/POLY and their bar-level variants over a set of pieces.
    Eval(commands::EvalArgs),
    /// Pooled per-element latents as CSV, with PCA and silhouette scores.
    ExportLatents(commands::ExportLatentsArgs),
    /// Finite-difference check of every primitive and the full loss.
    Gradcheck(commands::GradcheckArgs),
    /// Prints a checkpoint's metadata and compares it with a preset.
    InspectCheckpoint(commands::InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Tokenize(_) => "tokenize",
            Command::Train(_) => "train",
            Command::TrainPrior(_) => "train-prior",
            Command::Generate(_) => "generate",
            Command::Transfer(_) => "transfer",
            Command::Eval(_) => "eval",
            Command::ExportLatents(_) => "export-latents",
            Command::Gradcheck(_) => "gradcheck",
            Command::InspectCheckpoint(_) => "inspect-checkpoint",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] MuserError),
    /// A check ran to completion and failed; carries its exit code.
    #[error("{0}")]
    Check(String, u8),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(MuserError::Config(_)) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Check(_, code) => *code,
            CliError::Core(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
