//! Per-client grid search over (fc1 neurons, fc2 neurons, training epochs).
//!
//! Each client tunes its own forecaster on an internal 75/25 chronological
//! sub-split of its training windows and shares only the winning tuple and
//! score with the server. Normalized hyperparameter vectors feed the k-means
//! clustering stage.

use crate::data::{split, DataError, WindowedDataset};
use crate::neural::{forward, init_forecaster, mse_loss, train, NetworkSpec, NeuralError, OptimizerConfig};
use crate::seeds::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Internal sub-split used to score grid points.
pub const TUNING_SPLIT_FRACTION: f64 = 0.75;
/// Smallest dataset the search accepts (room for the internal split).
pub const MIN_TUNING_WINDOWS: usize = 8;
/// Epoch cap applied to candidates when fast mode is on.
pub const FAST_EPOCH_CAP: usize = 150;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("dataset has {actual} windows; grid search needs at least {required}")]
    DatasetTooSmall { required: usize, actual: usize },
    #[error("grid axis `{0}` must be non-empty and strictly increasing")]
    BadGridAxis(&'static str),
    #[error("hyperparameter {field}={value} is not on the grid")]
    OffGrid { field: &'static str, value: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One tuned configuration. Field order doubles as the lexicographic
/// tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HyperParams {
    pub fc1_neurons: usize,
    pub fc2_neurons: usize,
    pub epochs: usize,
}

impl HyperParams {
    pub fn new(fc1_neurons: usize, fc2_neurons: usize, epochs: usize) -> Self {
        Self { fc1_neurons, fc2_neurons, epochs }
    }

    /// The network shape this tuple selects, on top of a base spec.
    pub fn spec(&self, base: &NetworkSpec) -> NetworkSpec {
        NetworkSpec { fc1_neurons: self.fc1_neurons, fc2_neurons: self.fc2_neurons, ..*base }
    }
}

/// Candidate values per axis; strictly increasing and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub fc1: Vec<usize>,
    pub fc2: Vec<usize>,
    pub epochs: Vec<usize>,
}

impl Default for HyperGrid {
    /// The union of per-cluster values the reference configuration uses, so
    /// every cluster tuple is reachable.
    fn default() -> Self {
        Self { fc1: vec![32, 44, 56, 68], fc2: vec![85, 127, 198], epochs: vec![103, 148, 247, 291] }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<(), TuneError> {
        for (name, axis) in [("fc1", &self.fc1), ("fc2", &self.fc2), ("epochs", &self.epochs)] {
            if axis.is_empty() || axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(TuneError::BadGridAxis(name));
            }
            if axis[0] == 0 {
                return Err(TuneError::BadGridAxis(name));
            }
        }
        Ok(())
    }

    /// All grid points in lexicographic (fc1, fc2, epochs) order.
    pub fn points(&self) -> Vec<HyperParams> {
        let mut out = Vec::with_capacity(self.fc1.len() * self.fc2.len() * self.epochs.len());
        for &fc1 in &self.fc1 {
            for &fc2 in &self.fc2 {
                for &epochs in &self.epochs {
                    out.push(HyperParams::new(fc1, fc2, epochs));
                }
            }
        }
        out
    }

    pub fn contains(&self, hp: &HyperParams) -> Result<(), TuneError> {
        if !self.fc1.contains(&hp.fc1_neurons) {
            return Err(TuneError::OffGrid { field: "fc1", value: hp.fc1_neurons });
        }
        if !self.fc2.contains(&hp.fc2_neurons) {
            return Err(TuneError::OffGrid { field: "fc2", value: hp.fc2_neurons });
        }
        if !self.epochs.contains(&hp.epochs) {
            return Err(TuneError::OffGrid { field: "epochs", value: hp.epochs });
        }
        Ok(())
    }
}

/// Search-time options.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridSearchConfig {
    pub optimizer: OptimizerConfig,
    /// Cap candidate epochs at [`FAST_EPOCH_CAP`] while searching.
    pub fast: bool,
}

/// Scores one grid point: train on the internal sub-train split, return the
/// validation MSE (scaled units, final model). The point seed is derived
/// from the tuple itself, so scores do not depend on grid composition and a
/// winning point re-evaluates to the identical score.
pub fn evaluate_point(
    data: &WindowedDataset,
    hp: &HyperParams,
    base: &NetworkSpec,
    config: &GridSearchConfig,
    seed: u64,
) -> Result<f64, TuneError> {
    if data.len() < MIN_TUNING_WINDOWS {
        return Err(TuneError::DatasetTooSmall { required: MIN_TUNING_WINDOWS, actual: data.len() });
    }
    let (sub_train, sub_val) = split(data.clone(), TUNING_SPLIT_FRACTION)?;
    let spec = hp.spec(base);
    let point_seed = derive_seed(
        seed,
        &[
            "grid",
            &hp.fc1_neurons.to_string(),
            &hp.fc2_neurons.to_string(),
            &hp.epochs.to_string(),
        ],
    );
    let epochs = if config.fast { hp.epochs.min(FAST_EPOCH_CAP) } else { hp.epochs };
    let weights = init_forecaster(&spec, point_seed)?;
    let report = train(weights, &spec, &sub_train, epochs, config.optimizer, point_seed)?;

    let predictions: Vec<f64> = sub_val
        .windows()
        .iter()
        .map(|w| forward(&report.weights, &spec, &w.input))
        .collect::<Result<_, _>>()?;
    let targets: Vec<f64> = sub_val.windows().iter().map(|w| w.target).collect();
    Ok(mse_loss(&predictions, &targets)?)
}

/// Evaluates every grid point and returns the argmin; ties go to the
/// lexicographically smallest tuple. Grid points run in parallel; the
/// reduction is a sequential scan in grid order, so the result is
/// reproducible bit-for-bit for a fixed `(data, grid, seed)`.
pub fn grid_search(
    data: &WindowedDataset,
    grid: &HyperGrid,
    base: &NetworkSpec,
    config: &GridSearchConfig,
    seed: u64,
) -> Result<(HyperParams, f64), TuneError> {
    grid.validate()?;
    if data.len() < MIN_TUNING_WINDOWS {
        return Err(TuneError::DatasetTooSmall { required: MIN_TUNING_WINDOWS, actual: data.len() });
    }
    let points = grid.points();
    let scored: Vec<(HyperParams, f64)> = points
        .par_iter()
        .map(|hp| evaluate_point(data, hp, base, config, seed).map(|score| (*hp, score)))
        .collect::<Result<_, _>>()?;
    Ok(select_best(&scored))
}

/// Argmin with first-wins semantics over a list already in lexicographic
/// grid order.
fn select_best(scored: &[(HyperParams, f64)]) -> (HyperParams, f64) {
    let mut best = scored[0];
    for &(hp, score) in &scored[1..] {
        if score < best.1 {
            best = (hp, score);
        }
    }
    best
}

/// Maps a tuned tuple onto `[0, 1]^3` using the grid's per-axis ranges, so
/// k-means distances are not dominated by the epochs axis. A single-value
/// axis maps to 0.
pub fn hyperparam_vector(hp: &HyperParams, grid: &HyperGrid) -> Result<[f64; 3], TuneError> {
    grid.validate()?;
    grid.contains(hp)?;
    let scale = |value: usize, axis: &[usize]| -> f64 {
        let min = axis[0] as f64;
        let max = axis[axis.len() - 1] as f64;
        if max > min {
            (value as f64 - min) / (max - min)
        } else {
            0.0
        }
    };
    Ok([
        scale(hp.fc1_neurons, &grid.fc1),
        scale(hp.fc2_neurons, &grid.fc2),
        scale(hp.epochs, &grid.epochs),
    ])
}

/// The per-client record shared with the server (the only data leaving a
/// client besides model weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub client_id: String,
    pub fc1: usize,
    pub fc2: usize,
    pub epochs: usize,
    pub score: f64,
}

impl TuningRecord {
    pub fn new(client_id: impl Into<String>, hp: HyperParams, score: f64) -> Self {
        Self {
            client_id: client_id.into(),
            fc1: hp.fc1_neurons,
            fc2: hp.fc2_neurons,
            epochs: hp.epochs,
            score,
        }
    }

    pub fn hyperparams(&self) -> HyperParams {
        HyperParams::new(self.fc1, self.fc2, self.epochs)
    }
}
