//! The three learning schemes (federated, centralized, local) applied to
//! individual (ILP) and aggregate (ALP) load prediction, plus RMSE metrics
//! and per-cluster report tables.
//!
//! All RMSE values are reported in kWh: predictions are inverse-scaled and
//! compared against the exact raw targets carried by each window.

use crate::data::{DataError, LoadSeries, WindowedDataset};
use crate::hypertune::HyperParams;
use crate::neural::{
    forward, init_forecaster, mse_loss, train, NetworkSpec, NeuralError, OptimizerConfig,
    TrainReport,
};
use crate::params::ParameterVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("prediction/actual arrays empty or of different lengths")]
    BadMetricInput,
    #[error("no datasets to pool")]
    EmptyPool,
    #[error("pooled datasets disagree on {0}")]
    PoolMismatch(&'static str),
    #[error("per-client results are misaligned: {0}")]
    Misaligned(String),
    #[error("result for scheme `{0}` is missing")]
    MissingScheme(Scheme),
    #[error("no per-client results supplied")]
    EmptyResults,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Federated,
    Centralized,
    Local,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Scheme::Federated => "federated",
            Scheme::Centralized => "centralized",
            Scheme::Local => "local",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ilp,
    Alp,
}

/// Root mean squared error, the square root of the mean squared error.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64, SchemeError> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(SchemeError::BadMetricInput);
    }
    Ok(mse_loss(predicted, actual)?.sqrt())
}

/// Predictions and ground truth for one split, in kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
    pub rmse: f64,
}

/// One scheme's predictions for one client (ILP) or one client group (ALP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub scheme: Scheme,
    pub task: Task,
    pub client_id: String,
    pub train: PredictionSet,
    pub test: PredictionSet,
}

fn predict_split(
    weights: &ParameterVector,
    spec: &NetworkSpec,
    data: &WindowedDataset,
) -> Result<PredictionSet, SchemeError> {
    let scaler = data.scaler();
    let predicted: Vec<f64> = data
        .windows()
        .iter()
        .map(|w| forward(weights, spec, &w.input).map(|y| scaler.invert(y)))
        .collect::<Result<_, _>>()?;
    let actual = data.targets_raw();
    let rmse = rmse(&predicted, &actual)?;
    Ok(PredictionSet { predicted, actual, rmse })
}

/// One-step-ahead individual load predictions over both splits, in kWh.
/// The caller supplies whichever model the scheme prescribes (cluster
/// global, pooled centralized, or the client's own).
pub fn predict_ilp(
    scheme: Scheme,
    client_id: &str,
    weights: &ParameterVector,
    spec: &NetworkSpec,
    train: &WindowedDataset,
    test: &WindowedDataset,
) -> Result<SchemeResult, SchemeError> {
    Ok(SchemeResult {
        scheme,
        task: Task::Ilp,
        client_id: client_id.to_string(),
        train: predict_split(weights, spec, train)?,
        test: predict_split(weights, spec, test)?,
    })
}

/// Aggregate load prediction by summation: each client forecasts its own
/// load and the forecasts are summed (used by the local and federated
/// schemes). Per-client results must be ILP results over aligned splits,
/// passed in ascending client-id order.
pub fn predict_alp_summed(
    scheme: Scheme,
    per_client: &[SchemeResult],
) -> Result<SchemeResult, SchemeError> {
    let first = per_client.first().ok_or(SchemeError::EmptyResults)?;
    let sum_split = |select: fn(&SchemeResult) -> &PredictionSet| -> Result<PredictionSet, SchemeError> {
        let len = select(first).predicted.len();
        let mut predicted = vec![0.0; len];
        let mut actual = vec![0.0; len];
        for result in per_client {
            let set = select(result);
            if set.predicted.len() != len {
                return Err(SchemeError::Misaligned(result.client_id.clone()));
            }
            for (acc, v) in predicted.iter_mut().zip(&set.predicted) {
                *acc += v;
            }
            for (acc, v) in actual.iter_mut().zip(&set.actual) {
                *acc += v;
            }
        }
        let rmse = rmse(&predicted, &actual)?;
        Ok(PredictionSet { predicted, actual, rmse })
    };
    Ok(SchemeResult {
        scheme,
        task: Task::Alp,
        client_id: "aggregate".to_string(),
        train: sum_split(|r| &r.train)?,
        test: sum_split(|r| &r.test)?,
    })
}

/// Aggregate load prediction from a model trained directly on the aggregate
/// series (the centralized default).
pub fn predict_alp_aggregate(
    scheme: Scheme,
    weights: &ParameterVector,
    spec: &NetworkSpec,
    train: &WindowedDataset,
    test: &WindowedDataset,
) -> Result<SchemeResult, SchemeError> {
    Ok(SchemeResult {
        scheme,
        task: Task::Alp,
        client_id: "aggregate".to_string(),
        train: predict_split(weights, spec, train)?,
        test: predict_split(weights, spec, test)?,
    })
}

/// Pools several clients' windows (already built with a shared scaler) into
/// one training set, in input order.
pub fn pool_windows(datasets: &[&WindowedDataset]) -> Result<WindowedDataset, SchemeError> {
    let first = datasets.first().ok_or(SchemeError::EmptyPool)?;
    let lookback = first.lookback();
    let scaler = *first.scaler();
    let mut windows = Vec::new();
    for ds in datasets {
        if ds.lookback() != lookback {
            return Err(SchemeError::PoolMismatch("lookback"));
        }
        if *ds.scaler() != scaler {
            return Err(SchemeError::PoolMismatch("scaler"));
        }
        windows.extend_from_slice(ds.windows());
    }
    Ok(WindowedDataset::from_windows(windows, lookback, scaler))
}

/// Centralized learning: one model over the pooled training windows,
/// trained for the tuple's epoch budget.
pub fn train_centralized(
    pool: &WindowedDataset,
    hp: &HyperParams,
    base: &NetworkSpec,
    optimizer: OptimizerConfig,
    seed: u64,
) -> Result<TrainReport, SchemeError> {
    if pool.is_empty() {
        return Err(SchemeError::EmptyPool);
    }
    let spec = hp.spec(base);
    let weights = init_forecaster(&spec, seed)?;
    Ok(train(weights, &spec, pool, hp.epochs, optimizer, seed)?)
}

/// Local learning: the client's own model on its own training windows.
pub fn train_local(
    client_train: &WindowedDataset,
    hp: &HyperParams,
    base: &NetworkSpec,
    optimizer: OptimizerConfig,
    seed: u64,
) -> Result<TrainReport, SchemeError> {
    let spec = hp.spec(base);
    let weights = init_forecaster(&spec, seed)?;
    Ok(train(weights, &spec, client_train, hp.epochs, optimizer, seed)?)
}

/// min/max/mean over member clients' ILP RMSEs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlpStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl IlpStats {
    fn over(values: impl Iterator<Item = f64>) -> Option<Self> {
        let values: Vec<f64> = values.collect();
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Self { min, max, mean })
    }
}

/// Train/test pair of any statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPair<T> {
    pub train: T,
    pub test: T,
}

/// One cluster's results in the layout of the reference tables: per-scheme
/// ILP min/max/mean and ALP RMSE for both splits, plus consumption stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: usize,
    pub members: Vec<String>,
    pub ilp_rmse: BTreeMap<Scheme, SplitPair<IlpStats>>,
    pub alp_rmse: BTreeMap<Scheme, SplitPair<f64>>,
    pub max_client_consumption: f64,
    pub mean_client_consumption: f64,
    pub max_aggregate_consumption: f64,
    pub mean_aggregate_consumption: f64,
}

/// Folds per-client ILP results and per-scheme ALP results into the report.
/// Every scheme in `schemes` must be represented in both inputs.
pub fn build_report(
    cluster: usize,
    schemes: &[Scheme],
    ilp_results: &[SchemeResult],
    alp_results: &[SchemeResult],
    member_series: &[LoadSeries],
) -> Result<ClusterReport, SchemeError> {
    if member_series.is_empty() {
        return Err(SchemeError::EmptyResults);
    }
    let mut members: Vec<String> = member_series.iter().map(|s| s.client_id.clone()).collect();
    members.sort();

    let mut ilp_rmse = BTreeMap::new();
    let mut alp_rmse = BTreeMap::new();
    for &scheme in schemes {
        let train_stats =
            IlpStats::over(ilp_results.iter().filter(|r| r.scheme == scheme).map(|r| r.train.rmse));
        let test_stats =
            IlpStats::over(ilp_results.iter().filter(|r| r.scheme == scheme).map(|r| r.test.rmse));
        let (train, test) = match (train_stats, test_stats) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(SchemeError::MissingScheme(scheme)),
        };
        ilp_rmse.insert(scheme, SplitPair { train, test });

        let alp = alp_results
            .iter()
            .find(|r| r.scheme == scheme && r.task == Task::Alp)
            .ok_or(SchemeError::MissingScheme(scheme))?;
        alp_rmse.insert(scheme, SplitPair { train: alp.train.rmse, test: alp.test.rmse });
    }

    let mut max_client_consumption = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for series in member_series {
        for &v in &series.values {
            max_client_consumption = max_client_consumption.max(v);
            sum += v;
            count += 1;
        }
    }
    let mean_client_consumption = sum / count as f64;

    let aggregate = crate::data::aggregate(member_series)?;
    let max_aggregate_consumption =
        aggregate.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_aggregate_consumption =
        aggregate.values.iter().sum::<f64>() / aggregate.values.len() as f64;

    Ok(ClusterReport {
        cluster,
        members,
        ilp_rmse,
        alp_rmse,
        max_client_consumption,
        mean_client_consumption,
        max_aggregate_consumption,
        mean_aggregate_consumption,
    })
}

/// CSV mirror of the report table. Scheme rows fill the three scheme
/// columns; consumption rows use the trailing `value` column.
pub fn write_report_csv<W: Write>(
    mut writer: W,
    report: &ClusterReport,
    config_hash: &str,
) -> std::io::Result<()> {
    writeln!(writer, "# config_hash={config_hash}")?;
    writeln!(writer, "section,metric,stat,federated,centralized,local,value")?;

    let scheme_cell = |map: &BTreeMap<Scheme, String>, scheme: Scheme| {
        map.get(&scheme).cloned().unwrap_or_default()
    };
    let columns = [Scheme::Federated, Scheme::Centralized, Scheme::Local];

    for (section, pick) in [
        ("test", false),
        ("train", true),
    ] {
        for stat in ["min", "max", "mean"] {
            let cells: BTreeMap<Scheme, String> = report
                .ilp_rmse
                .iter()
                .map(|(&scheme, pair)| {
                    let stats = if pick { &pair.train } else { &pair.test };
                    let value = match stat {
                        "min" => stats.min,
                        "max" => stats.max,
                        _ => stats.mean,
                    };
                    (scheme, format!("{value}"))
                })
                .collect();
            let row: Vec<String> =
                columns.iter().map(|&s| scheme_cell(&cells, s)).collect();
            writeln!(writer, "{section},rmse_ilp,{stat},{},{},{},", row[0], row[1], row[2])?;
        }
        let cells: BTreeMap<Scheme, String> = report
            .alp_rmse
            .iter()
            .map(|(&scheme, pair)| {
                let value = if pick { pair.train } else { pair.test };
                (scheme, format!("{value}"))
            })
            .collect();
        let row: Vec<String> = columns.iter().map(|&s| scheme_cell(&cells, s)).collect();
        writeln!(writer, "{section},rmse_alp,-,{},{},{},", row[0], row[1], row[2])?;
    }

    for (metric, value) in [
        ("max_client_energy_consumption", report.max_client_consumption),
        ("mean_client_energy_consumption", report.mean_client_consumption),
        ("max_aggregate_energy_consumption", report.max_aggregate_consumption),
        ("mean_aggregate_energy_consumption", report.mean_aggregate_consumption),
    ] {
        writeln!(writer, "consumption,{metric},-,,,,{value}")?;
    }
    Ok(())
}
