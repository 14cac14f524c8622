mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbnet_core::Error;

/// Train, evaluate and ablate the feature boosting segmentation network.
#[derive(Parser, Debug)]
#[command(name = "fbnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset as FBT1 sample pairs.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Overrides the seed of the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one network as described by a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed of the run configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a directory of samples.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Smaller-side evaluation extent; defaults to the one stored in the checkpoint.
        #[arg(long)]
        base: Option<usize>,
    },
    /// Train all six attention and fusion strategies and tabulate them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write channel and spatial attention maps of one image as PGM files.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image tensor file (`<id>.img.fbt`).
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        base: Option<usize>,
        /// Number of channel-attention maps to export.
        #[arg(long, default_value_t = 4)]
        channels: usize,
    },
    /// Print the channel ledger and per-module parameter counts.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Exit code and class name reported for an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::MissingFile(_) | Error::Io(_) => (3, "io"),
        Error::Config(_) => (4, "config"),
        Error::Ingestion(_) | Error::Format { .. } | Error::EmptyEvaluation => (5, "ingestion"),
        Error::NonFinite(_) => (6, "numerical"),
        _ => (1, "internal"),
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("FBNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("FBNET_THREADS = {raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<(), Error> {
    configure_threads()?;
    match command {
        Command::GenData { spec, out, n, seed } => commands::gen_data(&spec, &out, n, seed),
        Command::Train { config, seed } => commands::train(&config, seed),
        Command::Eval { checkpoint, data, base } => commands::eval(&checkpoint, &data, base),
        Command::Ablate { config, seed } => commands::ablate(&config, seed),
        Command::ExportAttn {
            checkpoint,
            sample,
            out,
            base,
            channels,
        } => commands::export_attn(&checkpoint, &sample, &out, base, channels),
        Command::Params { config } => commands::params(&config),
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
            let text = e.to_string();
            let summary: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error: usage: {}", summary.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = classify(&e);
            let msg = match &e {
                Error::Config(m) => m.clone(),
                other => other.to_string(),
            };
            let msg = msg.replace('\n', " ");
            eprintln!("error: {class}: {msg}");
            ExitCode::from(code)
        }
    }
}
