//! Experiment orchestration for federated load forecasting: configuration,
//! the stage pipeline, and the clustered-vs-unclustered ablation.

pub mod config;
pub mod pipeline;

use config::ExperimentConfig;
use pipeline::{Pipeline, Stage};

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration (exit code 1).
    Config(String),
    /// A pipeline stage failed (exit code 2).
    Stage { stage: &'static str, source: anyhow::Error },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Stage { stage, source } => write!(f, "stage `{stage}` failed: {source:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Stage { .. } => 2,
        }
    }
}

/// Runs one stage (or the whole pipeline) under an optional dedicated
/// thread pool. `threads = None` uses the global default pool; results are
/// identical at any thread count.
pub fn run(config: ExperimentConfig, stage: Option<Stage>, threads: Option<usize>) -> Result<(), CliError> {
    let pipeline = Pipeline::new(config)?;
    let work = || match stage {
        Some(stage) => pipeline.run_stage(stage),
        None => pipeline.run_pipeline(),
    };
    match threads {
        None => work(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            pool.install(work)
        }
    }
}
