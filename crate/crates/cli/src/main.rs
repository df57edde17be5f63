use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedpriv_cli::experiments::{attack_eval, budget_plan, compare_aggregators, compare_comms, run_with_summary};
use fedpriv_cli::metrics::{validate_jsonl, write_jsonl};
use fedpriv_cli::{tables, CliError, ExperimentConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fedpriv", version, about = "Privacy-preserving federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file (JSONL).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write per-round metrics plus a summary.
    Run(Common),
    /// FedAvg vs weighted vs robust aggregation.
    CompareAggregators {
        #[command(flatten)]
        common: Common,
        /// Number of seeds; the table reports medians.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Communication stacks from dense uploads to the full pipeline.
    CompareComms {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Poisoning attacks with and without the robust pipeline.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Per-round and per-client privacy budget allocation.
    BudgetPlan {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        rounds: usize,
        /// `SAMPLES:CONTRIBUTION`, once per client.
        #[arg(long = "client", value_parser = parse_client, required = true)]
        clients: Vec<(f64, f64)>,
        /// Denominator of the per-client split; defaults to the sum over clients.
        #[arg(long)]
        denom: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a metrics file against the record schema.
    CheckMetrics { path: PathBuf },
}

fn parse_client(s: &str) -> Result<(f64, f64), String> {
    let (n, g) = s.split_once(':').unwrap_or((s, "1"));
    let n: f64 = n.parse().map_err(|_| format!("bad sample count in `{s}`"))?;
    let g: f64 = g.parse().map_err(|_| format!("bad contribution in `{s}`"))?;
    Ok((n, g))
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Io(p.display().to_string(), e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_rows<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<(), CliError> {
    let Some(path) = path else { return Ok(()) };
    let mut out = open_out(Some(path))?;
    let io = |e: io::Error| CliError::Io(path.display().to_string(), e);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| CliError::Runtime(e.to_string()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let (outcome, summary) = run_with_summary(&cfg)?;
            write_jsonl(&outcome.reports, &summary, open_out(common.out.as_deref())?)?;
            if common.out.is_some() {
                println!(
                    "rounds {}  final accuracy {:.4}  total MB {:.4}  simulated seconds {:.3}  rounds-to-target {}",
                    summary.rounds,
                    summary.final_accuracy,
                    summary.total_mb,
                    summary.total_seconds,
                    summary.rounds_to_target.map_or_else(|| "-".into(), |r| r.to_string())
                );
            }
        }
        Command::CompareAggregators { common, seeds } => {
            let rows = compare_aggregators(&load(&common)?, seeds)?;
            print!("{}", tables::aggregators(&rows));
            write_rows(common.out.as_deref(), &rows)?;
        }
        Command::CompareComms { common, seeds } => {
            let rows = compare_comms(&load(&common)?, seeds)?;
            print!("{}", tables::comms(&rows));
            write_rows(common.out.as_deref(), &rows)?;
        }
        Command::AttackEval { common, seeds } => {
            let rows = attack_eval(&load(&common)?, seeds)?;
            print!("{}", tables::attacks(&rows));
            write_rows(common.out.as_deref(), &rows)?;
        }
        Command::BudgetPlan { epsilon, rounds, clients, denom, out } => {
            let plan = budget_plan(epsilon, rounds, &clients, denom).map_err(|e| CliError::Config(e.to_string()))?;
            print!("{}", tables::budget(&plan));
            write_rows(out.as_deref(), std::slice::from_ref(&plan))?;
        }
        Command::CheckMetrics { path } => {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
            let rounds = validate_jsonl(&text).map_err(CliError::Runtime)?;
            println!("{}: ok ({rounds} rounds)", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDPRIV_LOG", "error")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
