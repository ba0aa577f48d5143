use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpm_core::experiment::{self, ExperimentConfig};
use lpm_core::Error;

#[derive(Debug, Parser)]
#[command(name = "lpm", version, about = "Least-privilege inference experiments")]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write JSONL datasets and a manifest.
    GenData,
    /// Pretrain, apply surgery and run multi-privilege training.
    Train,
    /// Calibrate and evaluate allocation policies.
    Frontier,
    /// Single-module rank sweep with BH-masked significance.
    Sensitivity,
    /// Search for a capability-suppression configuration.
    Suppress,
    /// Linear-probe capacity audit per rank.
    Probe,
    /// Held-out loss of SVD truncation versus nested training.
    SvdCompare,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Io { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        3 => "io",
        4 => "checkpoint",
        _ => "runtime",
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_seed(cmd: Command, cfg: &ExperimentConfig, seed: u64) -> Result<serde_json::Value, Error> {
    let json = |v: Result<serde_json::Value, serde_json::Error>| v.map_err(|e| Error::Format(e.to_string()));
    match cmd {
        Command::GenData => json(serde_json::to_value(experiment::gen_data(cfg, seed)?)),
        Command::Train => json(serde_json::to_value(experiment::cmd_train(cfg, seed)?)),
        Command::Frontier => json(serde_json::to_value(experiment::cmd_frontier(cfg, seed)?)),
        Command::Sensitivity => json(serde_json::to_value(experiment::cmd_sensitivity(cfg, seed)?)),
        Command::Suppress => json(serde_json::to_value(experiment::cmd_suppress(cfg, seed)?)),
        Command::Probe => json(serde_json::to_value(experiment::cmd_probe(cfg, seed)?)),
        Command::SvdCompare => json(serde_json::to_value(experiment::cmd_svd_compare(cfg, seed)?)),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    for &seed in &cfg.seeds {
        let summary = run_seed(cli.command, &cfg, seed)?;
        println!("{}", serde_json::json!({ "seed": seed, "summary": summary }));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": kind(&e), "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
