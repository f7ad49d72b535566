//! Adam optimizer with bias correction.

use crate::neural::NeuralError;
use crate::params::ParameterVector;
use serde::{Deserialize, Serialize};

/// Optimizer constants. Defaults are the canonical Adam values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    config: OptimizerConfig,
}

impl AdamState {
    /// Zero-initialized moments for a parameter vector of `len` values.
    pub fn new(len: usize, config: OptimizerConfig) -> Self {
        Self { first_moment: vec![0.0; len], second_moment: vec![0.0; len], step: 0, config }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One bias-corrected Adam update. Returns the new weights and state,
/// leaving the inputs untouched.
pub fn adam_step(
    weights: &ParameterVector,
    gradients: &ParameterVector,
    state: &AdamState,
) -> Result<(ParameterVector, AdamState), NeuralError> {
    weights.ensure_same_manifest(gradients)?;
    if state.len() != weights.len() {
        return Err(NeuralError::StateLengthMismatch {
            expected: weights.len(),
            actual: state.len(),
        });
    }

    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let cfg = &next.config;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let mut updated = weights.clone();
    let grad = gradients.values();
    let out = updated.values_mut();
    for idx in 0..grad.len() {
        let g = grad[idx];
        let m = cfg.beta1 * next.first_moment[idx] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * next.second_moment[idx] + (1.0 - cfg.beta2) * g * g;
        next.first_moment[idx] = m;
        next.second_moment[idx] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        out[idx] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }

    Ok((updated, next))
}
