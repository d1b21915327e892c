mod commands;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protodist::ood::{FusionNorm, ScoreKind};
use serde_json::Value;

use commands::{CliError, Outcome};

/// Prototype-distance VAE: training, OOD evaluation and latent-space exports.
#[derive(Debug, Parser)]
#[command(name = "protodist", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model, then fit score normalizers on validation data.
    ///
    /// Any config key can be overridden with `--section.key value`.
    Train(TrainArgs),
    /// Score ID and OOD sets with a trained checkpoint.
    EvalOod(EvalArgs),
    /// Write input/reconstruction image grids, or decoded prototypes.
    Reconstruct(ReconstructArgs),
    /// Export latent means and prototypes as CSV.
    Project(ProjectArgs),
    /// Summarize evaluation reports as a markdown table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat `section.key` JSON config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for the checkpoint, log and config snapshot.
    #[arg(long, default_value = "protodist-run")]
    out: PathBuf,
    /// Continue from the checkpoint already in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// ID source (`idx:<images>:<labels>` or manifest); its test split is used if present.
    #[arg(long)]
    id: String,
    #[arg(long)]
    ood: String,
    #[arg(long, default_value = "inf")]
    p: FusionNorm,
    #[arg(long, default_value = "dist_ratio")]
    distance_score: ScoreKind,
    #[arg(long, default_value = "perceptual")]
    recon_score: ScoreKind,
    /// Use at most this many samples from each set.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Directory receiving `report.json` and `scores.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<String>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Decode the prototype bank instead of (or in addition to) samples.
    #[arg(long)]
    prototypes: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long)]
    ood: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// `report.json` files written by `eval-ood`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, Value)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").filter(|k| k.contains('.') && !k.starts_with('.'));
        match key {
            Some(k) if k.contains('=') => {
                let (k, v) = k.split_once('=').expect("checked");
                overrides.push((k.to_string(), protodist::config::parse_override(v)));
            }
            Some(k) if it.peek().is_some() => {
                let v = it.next().expect("peeked");
                overrides.push((k.to_string(), protodist::config::parse_override(&v)));
            }
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn run(cli: Cli, overrides: Vec<(String, Value)>) -> Result<Outcome, CliError> {
    if !overrides.is_empty() && !matches!(cli.command, Command::Train(_)) {
        return Err(CliError::usage("config overrides are only accepted by `train`"));
    }
    match cli.command {
        Command::Train(a) => commands::train(a.config.as_deref(), &a.out, a.resume, &overrides),
        Command::EvalOod(a) => commands::eval_ood(&commands::EvalRequest {
            checkpoint: a.checkpoint,
            id: a.id,
            ood: a.ood,
            fusion: protodist::FusionConfig {
                distance_score: a.distance_score,
                recon_score: a.recon_score,
                p: a.p,
            },
            limit: a.limit,
            batch_size: a.batch_size,
            out: a.out,
        }),
        Command::Reconstruct(a) => {
            commands::reconstruct(&a.checkpoint, a.data.as_deref(), a.count, a.prototypes, &a.out)
        }
        Command::Project(a) => commands::project(&a.checkpoint, &a.id, a.ood.as_deref(), a.limit, &a.out),
        Command::Report(a) => commands::report(&a.reports, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(outcome) => {
            for path in &outcome.artifacts {
                println!("wrote {}", path.display());
            }
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
