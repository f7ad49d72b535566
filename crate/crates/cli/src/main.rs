use clap::{Parser, Subcommand};
use fedcast_cli::config::{ExperimentConfig, OUT_DIR_ENV};
use fedcast_cli::pipeline::Stage;
use fedcast_cli::{run, CliError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Federated short-term load forecasting experiments.
#[derive(Parser)]
#[command(name = "fedcast", version, about)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured output directory (also: FEDCAST_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads (default: one per core). Results are identical at any
    /// level of parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the master seed.
    #[arg(long, global = true)]
    master_seed: Option<u64>,

    /// Override the sliding-window length in hours.
    #[arg(long, global = true)]
    lookback: Option<usize>,

    /// Override the chronological train fraction.
    #[arg(long, global = true)]
    train_fraction: Option<f64>,

    /// Override the LSTM hidden width.
    #[arg(long, global = true)]
    lstm_hidden: Option<usize>,

    /// Override the fixed cluster count.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Override the federation round count.
    #[arg(long, global = true)]
    rounds: Option<usize>,

    /// Override local epochs per round.
    #[arg(long, global = true)]
    local_epochs: Option<usize>,

    /// Cap grid-search epochs for fast desk-scale runs.
    #[arg(long, global = true)]
    fast: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the fleet CSV (synthetic generation or CSV ingestion).
    Synth,
    /// Per-client hyperparameter grid search.
    Tune,
    /// K-means over hyperparameter vectors (+ inertia curve in elbow mode).
    Cluster,
    /// Clustered federated training with deterrent removal.
    Federate,
    /// Centralized models over pooled data.
    Centralize,
    /// Per-client local models.
    Localize,
    /// ILP/ALP evaluation and per-cluster report tables.
    Report,
    /// Clustered-vs-unclustered convergence comparison for a probe client.
    Ablate,
    /// All stages in order.
    Pipeline,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file.toml> is required".to_string()))?;
    let mut config = ExperimentConfig::from_toml_file(path).map_err(CliError::Config)?;

    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            config.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    if let Some(seed) = cli.master_seed {
        config.master_seed = seed;
    }
    if let Some(lookback) = cli.lookback {
        config.lookback = lookback;
    }
    if let Some(fraction) = cli.train_fraction {
        config.train_fraction = fraction;
    }
    if let Some(hidden) = cli.lstm_hidden {
        config.lstm_hidden = hidden;
    }
    if let Some(k) = cli.k {
        config.cluster.k = k;
    }
    if let Some(rounds) = cli.rounds {
        config.federation.rounds = Some(rounds);
    }
    if let Some(epochs) = cli.local_epochs {
        config.federation.local_epochs = epochs;
    }
    if cli.fast {
        config.grid.fast = true;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are not errors.
            if err.use_stderr() {
                eprintln!("{err}");
                return ExitCode::from(1);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };

    let stage = match cli.command {
        Command::Synth => Some(Stage::Synth),
        Command::Tune => Some(Stage::Tune),
        Command::Cluster => Some(Stage::Cluster),
        Command::Federate => Some(Stage::Federate),
        Command::Centralize => Some(Stage::Centralize),
        Command::Localize => Some(Stage::Localize),
        Command::Report => Some(Stage::Report),
        Command::Ablate => Some(Stage::Ablate),
        Command::Pipeline => None,
    };

    let config = match resolve_config(&cli) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("{err}");
            return ExitCode::from(err.exit_code());
        }
    };

    match run(config, stage, cli.threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}
