//! `sahc`: synthesize data, train, evaluate and stream predictions.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sahc::Error;

#[derive(Parser)]
#[command(name = "sahc", version, about = "Online surgical phase recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (SFB files plus manifest).
    Synth {
        /// Key-value file with `synth.*` keys; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for the SFB files and `manifest.txt`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override a spec key, e.g. `--set synth.noise=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model and write per-epoch checkpoints, the epoch log and the best checkpoint.
    Train {
        /// Key-value configuration file (`model.*`, `train.*`, `loss.*`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding `manifest.txt` and the SFB files.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, `epochs.csv` and the `best` marker.
        #[arg(long)]
        out: PathBuf,
        /// Override a configuration key, e.g. `--set model.D=32`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One of train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for `metrics.txt`, `metrics.kv` and per-video predictions.
        #[arg(long)]
        report: PathBuf,
        /// Stream every video frame by frame and certify causality.
        #[arg(long)]
        online: bool,
        /// Future perturbations per video for the causality certificate.
        #[arg(long, default_value_t = 20)]
        checks: usize,
        /// Seed of the certificate's perturbations.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stream per-frame predictions for one video and draw its phase ribbon.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single SFB file.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the ribbon SVG and its CSV.
        #[arg(long)]
        ribbon: PathBuf,
        /// Accepted for interface uniformity; prediction is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Capacity { .. }
        | Error::TooShort { .. }
        | Error::Format { .. }
        | Error::Data(_)
        | Error::Incompatible(_)
        | Error::Io { .. } => 3,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) | Error::Causality { .. } | Error::Autodiff(_) => 4,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("SAHC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SAHC_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::Synth {
            spec,
            out,
            seed,
            overrides,
        } => commands::synth(spec.as_deref(), &out, seed, &overrides),
        Command::Train {
            config,
            data,
            out,
            overrides,
            seed,
            resume,
        } => commands::train(config.as_deref(), &data, &out, &overrides, seed, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
            online,
            checks,
            seed,
        } => commands::eval(&checkpoint, &data, &split, &report, online.then_some(checks), seed),
        Command::Predict {
            checkpoint,
            input,
            ribbon,
            seed: _,
        } => commands::predict(&checkpoint, &input, &ribbon),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
