//! From-scratch LSTM + dense forecaster.
//!
//! One LSTM layer reads the scaled load window, two ReLU dense layers and a
//! linear unit produce the next-hour prediction. Loss is mean squared error,
//! gradients are exact (backpropagation through time), updates use Adam.
//! Everything is `f64` and deterministic given a seed.

mod adam;
mod lstm;

pub use adam::{adam_step, AdamState, OptimizerConfig};

use crate::data::WindowedDataset;
use crate::params::{Manifest, ParamError, ParameterVector, TensorShape};
use crate::seeds::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use lstm::Layout;

/// Datasets up to this many windows train full-batch (one update per epoch).
pub const FULL_BATCH_LIMIT: usize = 2048;
/// Mini-batch size used beyond [`FULL_BATCH_LIMIT`].
pub const MINI_BATCH_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("window must not be empty")]
    EmptyWindow,
    #[error("batch must not be empty")]
    EmptyBatch,
    #[error("dataset must not be empty")]
    EmptyDataset,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("prediction/actual length mismatch or empty input")]
    BadLossInput,
    #[error("optimizer state has {actual} entries, weights have {expected}")]
    StateLengthMismatch { expected: usize, actual: usize },
}

/// Layer sizes of one forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Features per timestep; 1 for the univariate load window.
    pub input_size: usize,
    pub lstm_hidden: usize,
    pub fc1_neurons: usize,
    pub fc2_neurons: usize,
    /// Always 1: the next-hour load.
    pub output_size: usize,
}

impl NetworkSpec {
    pub fn new(lstm_hidden: usize, fc1_neurons: usize, fc2_neurons: usize) -> Self {
        Self { input_size: 1, lstm_hidden, fc1_neurons, fc2_neurons, output_size: 1 }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let fields = [
            ("input_size", self.input_size),
            ("lstm_hidden", self.lstm_hidden),
            ("fc1_neurons", self.fc1_neurons),
            ("fc2_neurons", self.fc2_neurons),
            ("output_size", self.output_size),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(NeuralError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        if self.output_size != 1 {
            return Err(NeuralError::InvalidSpec("output_size must be 1".to_string()));
        }
        Ok(())
    }

    /// Manifest in the fixed documented order: LSTM input weights, LSTM
    /// recurrent weights, LSTM biases, fc1 weight/bias, fc2 weight/bias,
    /// output weight/bias.
    pub fn manifest(&self) -> Manifest {
        let gates = 4 * self.lstm_hidden;
        Manifest::new(vec![
            TensorShape::new("lstm.w_ih", vec![gates, self.input_size]),
            TensorShape::new("lstm.w_hh", vec![gates, self.lstm_hidden]),
            TensorShape::new("lstm.bias", vec![gates]),
            TensorShape::new("fc1.weight", vec![self.fc1_neurons, self.lstm_hidden]),
            TensorShape::new("fc1.bias", vec![self.fc1_neurons]),
            TensorShape::new("fc2.weight", vec![self.fc2_neurons, self.fc1_neurons]),
            TensorShape::new("fc2.bias", vec![self.fc2_neurons]),
            TensorShape::new("out.weight", vec![self.output_size, self.fc2_neurons]),
            TensorShape::new("out.bias", vec![self.output_size]),
        ])
    }

    pub fn param_count(&self) -> usize {
        self.manifest().total_len()
    }

    fn ensure_matches(&self, weights: &ParameterVector) -> Result<Layout, NeuralError> {
        self.validate()?;
        if self.input_size != 1 {
            return Err(NeuralError::InvalidSpec(
                "forward pass consumes univariate windows; input_size must be 1".to_string(),
            ));
        }
        let expected = self.manifest();
        if *weights.manifest() != expected {
            return Err(NeuralError::Param(ParamError::ManifestMismatch {
                left: format!("{expected:?}"),
                right: format!("{:?}", weights.manifest()),
            }));
        }
        Ok(Layout::new(self))
    }
}

/// Result of one training run: per-epoch MSE, final weights, and the number
/// of training windows (the client's contribution weight in aggregation).
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub weights: ParameterVector,
    pub sample_count: usize,
}

/// Draws initial weights for a forecaster, uniform in
/// `(-1/sqrt(fan_in), +1/sqrt(fan_in))` per tensor, with the forget-gate
/// bias block forced to 1.0. Deterministic for a fixed `(spec, seed)`.
pub fn init_forecaster(spec: &NetworkSpec, seed: u64) -> Result<ParameterVector, NeuralError> {
    spec.validate()?;
    let manifest = spec.manifest();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let fan_in = |name: &str| -> usize {
        match name {
            "lstm.w_ih" => spec.input_size,
            "lstm.w_hh" | "lstm.bias" | "fc1.weight" | "fc1.bias" => spec.lstm_hidden,
            "fc2.weight" | "fc2.bias" => spec.fc1_neurons,
            "out.weight" | "out.bias" => spec.fc2_neurons,
            other => unreachable!("unknown tensor {other}"),
        }
    };

    let mut values = Vec::with_capacity(manifest.total_len());
    for entry in manifest.entries() {
        let bound = 1.0 / (fan_in(&entry.name) as f64).sqrt();
        for _ in 0..entry.len() {
            let unit: f64 = rng.random();
            values.push(-bound + unit * 2.0 * bound);
        }
    }

    let mut weights = ParameterVector::new(values, manifest)?;
    let h = spec.lstm_hidden;
    let bias = weights.tensor_mut("lstm.bias")?;
    for b in bias[h..2 * h].iter_mut() {
        *b = 1.0;
    }
    Ok(weights)
}

/// Next-hour prediction for one scaled window. Pure: neither weights nor
/// spec are mutated; hidden and cell state start at zero for each call.
pub fn forward(weights: &ParameterVector, spec: &NetworkSpec, window: &[f64]) -> Result<f64, NeuralError> {
    let layout = spec.ensure_matches(weights)?;
    if window.is_empty() {
        return Err(NeuralError::EmptyWindow);
    }
    Ok(lstm::forward_value(weights.values(), &layout, window))
}

/// Mean squared error over paired arrays.
pub fn mse_loss(predicted: &[f64], actual: &[f64]) -> Result<f64, NeuralError> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(NeuralError::BadLossInput);
    }
    let sum: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| {
            let d = p - a;
            d * d
        })
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Gradient of the batch-mean MSE with respect to every parameter.
pub fn compute_gradients(
    weights: &ParameterVector,
    spec: &NetworkSpec,
    batch: &[(&[f64], f64)],
) -> Result<ParameterVector, NeuralError> {
    let (grad, _) = gradients_and_loss(weights, spec, batch)?;
    Ok(grad)
}

/// Shared worker: exact gradients plus the batch-mean MSE at the current
/// weights. Windows are processed in order so results are independent of
/// any outer parallelism.
fn gradients_and_loss(
    weights: &ParameterVector,
    spec: &NetworkSpec,
    batch: &[(&[f64], f64)],
) -> Result<(ParameterVector, f64), NeuralError> {
    let layout = spec.ensure_matches(weights)?;
    if batch.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    for (window, _) in batch {
        if window.is_empty() {
            return Err(NeuralError::EmptyWindow);
        }
    }

    let values = weights.values();
    let mut grad = vec![0.0; layout.total];
    let mut loss_sum = 0.0;
    let inv = 1.0 / batch.len() as f64;

    for (window, target) in batch {
        let trace = lstm::forward_trace(values, &layout, window);
        let err = trace.y - target;
        loss_sum += err * err;
        // d(mean MSE)/dy for this sample.
        let dy = 2.0 * err * inv;
        lstm::backward(values, &layout, &trace, dy, &mut grad);
    }

    let grad = ParameterVector::new(grad, weights.manifest().clone())?;
    Ok((grad, loss_sum * inv))
}

/// A resumable training loop: weights, Adam moments, and the shuffle RNG
/// persist across calls, so a federated client that trains E epochs per
/// round follows exactly the trajectory of one uninterrupted local run.
#[derive(Debug, Clone)]
pub struct TrainingSession {
    spec: NetworkSpec,
    weights: ParameterVector,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl TrainingSession {
    pub fn new(
        weights: ParameterVector,
        spec: &NetworkSpec,
        optimizer: OptimizerConfig,
        seed: u64,
    ) -> Result<Self, NeuralError> {
        spec.ensure_matches(&weights)?;
        let adam = AdamState::new(weights.len(), optimizer);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["shuffle"]));
        Ok(Self { spec: *spec, weights, adam, rng })
    }

    pub fn weights(&self) -> &ParameterVector {
        &self.weights
    }

    pub fn optimizer_step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// Replaces the working weights (e.g. with a server broadcast) while
    /// keeping optimizer moments and the shuffle stream.
    pub fn set_weights(&mut self, weights: &ParameterVector) -> Result<(), NeuralError> {
        self.spec.ensure_matches(weights)?;
        self.weights = weights.clone();
        Ok(())
    }

    /// Runs `epochs` training epochs, returning the per-epoch MSE measured
    /// at the weights that produced each update (pre-step loss).
    pub fn run_epochs(&mut self, data: &WindowedDataset, epochs: usize) -> Result<Vec<f64>, NeuralError> {
        if data.is_empty() {
            return Err(NeuralError::EmptyDataset);
        }
        if epochs == 0 {
            return Err(NeuralError::ZeroEpochs);
        }

        let n = data.len();
        let mut losses = Vec::with_capacity(epochs);

        if n <= FULL_BATCH_LIMIT {
            let batch: Vec<(&[f64], f64)> =
                data.windows().iter().map(|w| (w.input.as_slice(), w.target)).collect();
            for _ in 0..epochs {
                let (grad, loss) = gradients_and_loss(&self.weights, &self.spec, &batch)?;
                let (next, state) = adam_step(&self.weights, &grad, &self.adam)?;
                self.weights = next;
                self.adam = state;
                losses.push(loss);
            }
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..epochs {
                shuffle(&mut order, &mut self.rng);
                let mut weighted_loss = 0.0;
                for chunk in order.chunks(MINI_BATCH_SIZE) {
                    let batch: Vec<(&[f64], f64)> = chunk
                        .iter()
                        .map(|&i| {
                            let w = &data.windows()[i];
                            (w.input.as_slice(), w.target)
                        })
                        .collect();
                    let (grad, loss) = gradients_and_loss(&self.weights, &self.spec, &batch)?;
                    let (next, state) = adam_step(&self.weights, &grad, &self.adam)?;
                    self.weights = next;
                    self.adam = state;
                    weighted_loss += loss * chunk.len() as f64;
                }
                losses.push(weighted_loss / n as f64);
            }
        }

        Ok(losses)
    }
}

/// Fisher-Yates with our own index draws, so shuffling stays reproducible
/// regardless of rand's internal shuffle implementation.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Trains from `weights` for `epochs` epochs and reports the loss curve,
/// final weights, and window count. Deterministic given the seed.
pub fn train(
    weights: ParameterVector,
    spec: &NetworkSpec,
    data: &WindowedDataset,
    epochs: usize,
    optimizer: OptimizerConfig,
    seed: u64,
) -> Result<TrainReport, NeuralError> {
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    if epochs == 0 {
        return Err(NeuralError::ZeroEpochs);
    }
    let mut session = TrainingSession::new(weights, spec, optimizer, seed)?;
    let epoch_losses = session.run_epochs(data, epochs)?;
    Ok(TrainReport { epoch_losses, weights: session.weights.clone(), sample_count: data.len() })
}

#[cfg(test)]
mod tests;
