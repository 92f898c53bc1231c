// SPDX-License-Identifier: Apache-2.0

//! `ehrfl` command-line runner.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ehrfl::costmodel::CostLedger;
use ehrfl::dpselect::{Metric, SelectionRule};
use ehrfl::experiment::{self, ExperimentConfig};
use ehrfl::fedcore::Algorithm;
use ehrfl::linearizer;

#[derive(Parser)]
#[command(name = "ehrfl", version, about = "Federated learning on linearized EHR text with private participant selection")]
struct Cli {
    /// Experiment configuration (JSON). Defaults to the built-in five-client benchmark.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (for `linearize`: the output file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// For `generate`, the cohort seed; otherwise run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every configured client's dataset files.
    Generate,
    /// Run Single and every participant subset under every algorithm.
    Sweep(TrainingOverrides),
    /// Run the selection protocol for one seed.
    Select(SelectArgs),
    /// Correlate subject similarity with the change in host performance.
    Correlate,
    /// Evaluate similarity-selected federations against all subsets.
    SelectEval,
    /// Evaluate the participation cost ledger.
    Cost {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Linearize a client's events, one per line, blank line between patients.
    Linearize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        dict: PathBuf,
    },
}

#[derive(Args, Default)]
struct TrainingOverrides {
    /// Comma-separated algorithms, e.g. FedAvg,FedBN.
    #[arg(long = "algo", value_delimiter = ',')]
    algorithms: Vec<Algorithm>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    host: Option<String>,
    /// Restrict the experiment to these clients (host included automatically).
    #[arg(long, value_delimiter = ',')]
    participants: Vec<String>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long, default_value = "cosine")]
    metric: Metric,
    /// Participants to keep, host included.
    #[arg(long, conflicts_with = "threshold")]
    k: Option<usize>,
    /// Keep every candidate at least this similar instead of a fixed K.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[command(flatten)]
    training: TrainingOverrides,
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }

    fn run(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: error.into() }
    }
}

impl From<ehrfl::Error> for Failure {
    fn from(e: ehrfl::Error) -> Self {
        if e.is_config() {
            Self::config(e)
        } else {
            Self::run(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    match &cli.config {
        Some(path) => Ok(ExperimentConfig::load(path)?),
        None => Ok(ExperimentConfig::benchmark()),
    }
}

/// The configuration a finished sweep in `out` ran with, unless `--config`
/// names one explicitly.
fn sweep_config(cli: &Cli, out: &Path) -> Result<ExperimentConfig, Failure> {
    let stored = out.join("sweep_config.json");
    if cli.config.is_none() && stored.exists() {
        return Ok(ExperimentConfig::load(&stored)?);
    }
    load_config(cli)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &TrainingOverrides) -> Result<(), Failure> {
    if !o.algorithms.is_empty() {
        cfg.algorithms = o.algorithms.clone();
    }
    if let Some(r) = o.rounds {
        cfg.training.max_rounds = r;
    }
    if let Some(p) = o.patience {
        cfg.training.patience = p;
    }
    if let Some(mu) = o.mu {
        cfg.training.mu = mu;
    }
    if let Some(h) = &o.host {
        cfg.host = h.clone();
    }
    if !o.participants.is_empty() {
        for p in &o.participants {
            if !cfg.clients.iter().any(|c| c.spec.client_id == *p) {
                return Err(Failure::config(anyhow::anyhow!("unknown participant {p:?}")));
            }
        }
        let host = cfg.host.clone();
        cfg.clients.retain(|c| c.spec.client_id == host || o.participants.contains(&c.spec.client_id));
        cfg.k_values.retain(|&k| k <= cfg.clients.len());
    }
    cfg.validate()?;
    Ok(())
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ehrfl::synthdata::ClientDataset>, Failure> {
    experiment::load_datasets(cfg, out)
        .with_context(|| format!("no generated data under {}; run `ehrfl generate` first", out.display()))
        .map_err(Failure::run)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = out_dir(&cli);
    match &cli.command {
        Command::Generate => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = cli.seed {
                cfg.data_seed = s;
            }
            let files = experiment::cmd_generate(&cfg, &out)?;
            for f in files {
                println!("{}", f.patients.display());
            }
        }
        Command::Sweep(o) => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            apply_overrides(&mut cfg, o)?;
            let data = load_data(&cfg, &out)?;
            let sweep = experiment::run_sweep(&cfg, &data, &out)?;
            println!("{} cells in {}", sweep.cells.len(), out.join("sweep.csv").display());
            if !sweep.failed.is_empty() {
                return Err(Failure::run(anyhow::anyhow!("{} sweep cells failed; see table1.txt", sweep.failed.len())));
            }
        }
        Command::Select(a) => {
            let mut cfg = load_config(&cli)?;
            apply_overrides(&mut cfg, &a.training)?;
            if let Some(e) = a.epsilon {
                cfg.dp.epsilon = e;
            }
            if let Some(d) = a.delta {
                cfg.dp.delta = d;
            }
            if let Some(c) = a.clip {
                cfg.dp.clip_norm = c;
            }
            cfg.validate()?;
            let rule = match (a.k, a.threshold) {
                (_, Some(t)) => SelectionRule::Threshold(t),
                (Some(k), None) => SelectionRule::TopK(k),
                (None, None) => SelectionRule::TopK(3.min(cfg.clients.len())),
            };
            let seed = cli.seed.unwrap_or(cfg.seeds[0]);
            let data = load_data(&cfg, &out)?;
            let outcome = experiment::cmd_select(&cfg, &data, &out, a.metric, rule, seed)?;
            println!("{}", serde_json::to_string_pretty(&outcome.candidates).map_err(Failure::run)?);
        }
        Command::Correlate => {
            let mut cfg = sweep_config(&cli, &out)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let sweep = experiment::read_sweep(&out)?;
            let report = experiment::correlate(&cfg, &sweep)?;
            experiment::write_correlation(&report, &out)?;
            print!("{}", std::fs::read_to_string(out.join("table2.txt")).map_err(Failure::run)?);
        }
        Command::SelectEval => {
            let mut cfg = sweep_config(&cli, &out)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let sweep = experiment::read_sweep(&out)?;
            let report = experiment::select_eval(&cfg, &sweep)?;
            experiment::write_select_eval(&report, &out)?;
            print!("{}", std::fs::read_to_string(out.join("table3.txt")).map_err(Failure::run)?);
        }
        Command::Cost { ledger } => {
            let text = std::fs::read_to_string(ledger)
                .with_context(|| format!("reading {}", ledger.display()))
                .map_err(Failure::config)?;
            let ledger: CostLedger = serde_json::from_str(&text).map_err(Failure::config)?;
            let report = ledger.report().map_err(Failure::config)?;
            let json = serde_json::to_string_pretty(&report).map_err(Failure::run)?;
            if let Some(path) = &cli.out {
                std::fs::write(path, format!("{json}\n")).map_err(Failure::run)?;
            }
            println!("{json}");
        }
        Command::Linearize { input, dict } => {
            let target = cli.out.clone().ok_or_else(|| Failure::config(anyhow::anyhow!("linearize needs --out <file>")))?;
            let stats = linearizer::linearize_file(input, dict, &target)?;
            eprintln!("{} events, {} codes without a dictionary entry", stats.events, stats.unmapped_codes);
        }
    }
    Ok(())
}
