use super::*;
use crate::data::{Scaler, Window, WindowedDataset};
use rand::Rng;

fn tiny_spec() -> NetworkSpec {
    NetworkSpec { input_size: 1, lstm_hidden: 2, fc1_neurons: 2, fc2_neurons: 2, output_size: 1 }
}

fn dataset_from(windows: Vec<(Vec<f64>, f64)>, lookback: usize) -> WindowedDataset {
    let windows = windows
        .into_iter()
        .map(|(input, target)| Window { input, target, target_raw: target })
        .collect();
    WindowedDataset::from_windows(windows, lookback, Scaler { min: 0.0, max: 1.0 })
}

// ---------------------------------------------------------------------------
// Independent reference forward pass. Deliberately structured differently
// from the implementation: tensors are pulled by manifest name into nested
// matrices and the recurrence is evaluated gate by gate.
// ---------------------------------------------------------------------------

fn reference_forward(weights: &ParameterVector, spec: &NetworkSpec, window: &[f64]) -> f64 {
    let h = spec.lstm_hidden;
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());

    let matrix = |name: &str, rows: usize, cols: usize| -> Vec<Vec<f64>> {
        let flat = weights.tensor(name).unwrap();
        (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect()
    };
    let w_ih = matrix("lstm.w_ih", 4 * h, 1);
    let w_hh = matrix("lstm.w_hh", 4 * h, h);
    let bias = weights.tensor("lstm.bias").unwrap();

    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    for &x in window {
        let pre = |row: usize, hidden: &[f64]| -> f64 {
            let mut acc = bias[row] + w_ih[row][0] * x;
            for (k, &hv) in hidden.iter().enumerate() {
                acc += w_hh[row][k] * hv;
            }
            acc
        };
        let gates_i: Vec<f64> = (0..h).map(|j| sigmoid(pre(j, &hidden))).collect();
        let gates_f: Vec<f64> = (0..h).map(|j| sigmoid(pre(h + j, &hidden))).collect();
        let gates_g: Vec<f64> = (0..h).map(|j| pre(2 * h + j, &hidden).tanh()).collect();
        let gates_o: Vec<f64> = (0..h).map(|j| sigmoid(pre(3 * h + j, &hidden))).collect();
        let new_cell: Vec<f64> =
            (0..h).map(|j| gates_f[j] * cell[j] + gates_i[j] * gates_g[j]).collect();
        let new_hidden: Vec<f64> = (0..h).map(|j| gates_o[j] * new_cell[j].tanh()).collect();
        cell = new_cell;
        hidden = new_hidden;
    }

    let dense = |name: &str, input: &[f64], rows: usize, relu: bool| -> Vec<f64> {
        let w = matrix(&format!("{name}.weight"), rows, input.len());
        let b = weights.tensor(&format!("{name}.bias")).unwrap();
        (0..rows)
            .map(|r| {
                let z: f64 = b[r] + w[r].iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    };
    let a1 = dense("fc1", &hidden, spec.fc1_neurons, true);
    let a2 = dense("fc2", &a1, spec.fc2_neurons, true);
    dense("out", &a2, 1, false)[0]
}

// ---------------------------------------------------------------------------
// init_forecaster
// ---------------------------------------------------------------------------

#[test]
fn init_is_deterministic() {
    let spec = NetworkSpec { input_size: 1, lstm_hidden: 4, fc1_neurons: 3, fc2_neurons: 2, output_size: 1 };
    let a = init_forecaster(&spec, 7).unwrap();
    let b = init_forecaster(&spec, 7).unwrap();
    assert_eq!(a, b);
    let c = init_forecaster(&spec, 8).unwrap();
    assert_ne!(a.values(), c.values());
}

#[test]
fn parameter_count_of_documented_example() {
    // Hand count for {input 1, hidden 4, fc1 3, fc2 2, output 1}:
    //   lstm.w_ih 4*4*1 = 16, lstm.w_hh 4*4*4 = 64, lstm.bias 4*4 = 16,
    //   fc1 4*3+3 = 15, fc2 3*2+2 = 8, out 2*1+1 = 3  ->  122 total.
    let spec = NetworkSpec { input_size: 1, lstm_hidden: 4, fc1_neurons: 3, fc2_neurons: 2, output_size: 1 };
    assert_eq!(spec.param_count(), 16 + 64 + 16 + 15 + 8 + 3);
    assert_eq!(spec.param_count(), 122);
    let weights = init_forecaster(&spec, 1).unwrap();
    assert_eq!(weights.len(), 122);
    assert_eq!(*weights.manifest(), spec.manifest());
}

#[test]
fn init_rejects_zero_sized_layer() {
    let spec = NetworkSpec { input_size: 1, lstm_hidden: 4, fc1_neurons: 0, fc2_neurons: 2, output_size: 1 };
    assert!(matches!(init_forecaster(&spec, 1), Err(NeuralError::InvalidSpec(_))));
}

#[test]
fn init_bounds_and_forget_bias() {
    let spec = NetworkSpec { input_size: 1, lstm_hidden: 5, fc1_neurons: 4, fc2_neurons: 3, output_size: 1 };
    let weights = init_forecaster(&spec, 42).unwrap();
    let h = spec.lstm_hidden;
    let bias = weights.tensor("lstm.bias").unwrap();
    assert!(bias[h..2 * h].iter().all(|&b| b == 1.0));
    // Recurrent weights bounded by 1/sqrt(hidden).
    let bound = 1.0 / (h as f64).sqrt();
    assert!(weights.tensor("lstm.w_hh").unwrap().iter().all(|w| w.abs() <= bound));
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

#[test]
fn zero_weights_predict_zero() {
    let spec = tiny_spec();
    let weights = ParameterVector::zeros(spec.manifest());
    let y = forward(&weights, &spec, &[0.3, -1.2, 4.5]).unwrap();
    assert_eq!(y, 0.0);
}

#[test]
fn forward_matches_reference_evaluation() {
    let spec = NetworkSpec { input_size: 1, lstm_hidden: 2, fc1_neurons: 2, fc2_neurons: 2, output_size: 1 };
    let weights = init_forecaster(&spec, 123).unwrap();
    let window = [0.1, 0.7, 0.3, 0.9, 0.5];
    let got = forward(&weights, &spec, &window).unwrap();
    let expected = reference_forward(&weights, &spec, &window);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    // A couple of larger shapes for coverage.
    for (seed, h, f1, f2) in [(5u64, 3usize, 4usize, 2usize), (9, 6, 3, 5)] {
        let spec = NetworkSpec { input_size: 1, lstm_hidden: h, fc1_neurons: f1, fc2_neurons: f2, output_size: 1 };
        let weights = init_forecaster(&spec, seed).unwrap();
        let got = forward(&weights, &spec, &window).unwrap();
        let expected = reference_forward(&weights, &spec, &window);
        assert!((got - expected).abs() < 1e-12, "seed {seed}: {got} vs {expected}");
    }
}

#[test]
fn forward_is_pure() {
    let spec = tiny_spec();
    let weights = init_forecaster(&spec, 3).unwrap();
    let snapshot = weights.clone();
    let window = [0.2, 0.4, 0.6];
    let y1 = forward(&weights, &spec, &window).unwrap();
    let y2 = forward(&weights, &spec, &window).unwrap();
    assert_eq!(y1, y2);
    assert_eq!(weights, snapshot);
}

#[test]
fn forward_rejects_manifest_mismatch_and_empty_window() {
    let spec = tiny_spec();
    let other = NetworkSpec { input_size: 1, lstm_hidden: 3, fc1_neurons: 2, fc2_neurons: 2, output_size: 1 };
    let weights = init_forecaster(&other, 1).unwrap();
    assert!(forward(&weights, &spec, &[0.1]).is_err());
    let ok_weights = init_forecaster(&spec, 1).unwrap();
    assert!(matches!(forward(&ok_weights, &spec, &[]), Err(NeuralError::EmptyWindow)));
}

// ---------------------------------------------------------------------------
// mse_loss
// ---------------------------------------------------------------------------

#[test]
fn mse_hand_values() {
    assert_eq!(mse_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    // (1 + 9) / 2 = 5
    assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
    // Single element: (2 - 5)^2 = 9
    assert_eq!(mse_loss(&[2.0], &[5.0]).unwrap(), 9.0);
}

#[test]
fn mse_rejects_bad_input() {
    assert!(mse_loss(&[], &[]).is_err());
    assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
}

// ---------------------------------------------------------------------------
// compute_gradients: finite-difference oracle
// ---------------------------------------------------------------------------

/// Central difference of the batch-mean MSE at component `idx`, with the
/// loss difference evaluated per sample in the factored form
/// `(p+ - p-)(p+ + p- - 2t)`. Algebraically identical to
/// `(f(w+h) - f(w-h)) / 2h`, but free of the square-then-subtract
/// cancellation that otherwise drowns near-zero gradient components.
fn central_difference(
    weights: &ParameterVector,
    spec: &NetworkSpec,
    batch: &[(&[f64], f64)],
    idx: usize,
    h: f64,
) -> f64 {
    let mut plus = weights.clone();
    plus.values_mut()[idx] += h;
    let mut minus = weights.clone();
    minus.values_mut()[idx] -= h;
    let mut acc = 0.0;
    for (window, target) in batch {
        let pp = forward(&plus, spec, window).unwrap();
        let pm = forward(&minus, spec, window).unwrap();
        acc += (pp - pm) * (pp + pm - 2.0 * target);
    }
    acc / (batch.len() as f64 * 2.0 * h)
}

fn check_gradients(spec: &NetworkSpec, seed: u64, batch_size: usize, window_len: usize) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let weights = init_forecaster(spec, seed).unwrap();
    let windows: Vec<Vec<f64>> = (0..batch_size)
        .map(|_| (0..window_len).map(|_| rng.random::<f64>()).collect())
        .collect();
    let targets: Vec<f64> = (0..batch_size).map(|_| rng.random::<f64>()).collect();
    let batch: Vec<(&[f64], f64)> =
        windows.iter().zip(&targets).map(|(w, &t)| (w.as_slice(), t)).collect();

    let analytic = compute_gradients(&weights, spec, &batch).unwrap();

    for idx in 0..weights.len() {
        let numeric = central_difference(&weights, spec, &batch, idx, 1e-5);
        let a = analytic.values()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        assert!(
            rel < 1e-4,
            "component {idx} (seed {seed}): analytic {a}, numeric {numeric}, rel {rel}"
        );
    }
}

#[test]
fn gradients_match_finite_differences() {
    check_gradients(&tiny_spec(), 10, 4, 6);
    check_gradients(
        &NetworkSpec { input_size: 1, lstm_hidden: 3, fc1_neurons: 3, fc2_neurons: 2, output_size: 1 },
        10,
        8,
        5,
    );
    check_gradients(
        &NetworkSpec { input_size: 1, lstm_hidden: 4, fc1_neurons: 2, fc2_neurons: 3, output_size: 1 },
        10,
        2,
        8,
    );
}

#[test]
fn gradient_zero_at_exact_fit() {
    // Zero weights predict zero everywhere; zero targets make the batch a
    // stationary point, so the gradient must be exactly zero.
    let spec = tiny_spec();
    let weights = ParameterVector::zeros(spec.manifest());
    let w1 = vec![0.5, 0.2, 0.9];
    let w2 = vec![0.0, 1.0, 0.4];
    let batch: Vec<(&[f64], f64)> = vec![(w1.as_slice(), 0.0), (w2.as_slice(), 0.0)];
    let grad = compute_gradients(&weights, &spec, &batch).unwrap();
    assert!(grad.values().iter().all(|&g| g == 0.0));
}

#[test]
fn gradient_is_duplication_invariant() {
    let spec = tiny_spec();
    let weights = init_forecaster(&spec, 5).unwrap();
    let w1 = vec![0.1, 0.9, 0.4];
    let w2 = vec![0.8, 0.2, 0.6];
    let single: Vec<(&[f64], f64)> = vec![(w1.as_slice(), 0.3), (w2.as_slice(), 0.7)];
    let doubled: Vec<(&[f64], f64)> = vec![
        (w1.as_slice(), 0.3),
        (w2.as_slice(), 0.7),
        (w1.as_slice(), 0.3),
        (w2.as_slice(), 0.7),
    ];
    let g1 = compute_gradients(&weights, &spec, &single).unwrap();
    let g2 = compute_gradients(&weights, &spec, &doubled).unwrap();
    for (a, b) in g1.values().iter().zip(g2.values()) {
        let denom = a.abs().max(b.abs()).max(1e-12);
        assert!((a - b).abs() / denom < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn gradients_reject_empty_batch() {
    let spec = tiny_spec();
    let weights = init_forecaster(&spec, 5).unwrap();
    assert!(matches!(compute_gradients(&weights, &spec, &[]), Err(NeuralError::EmptyBatch)));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[test]
fn train_rejects_zero_epochs_and_empty_dataset() {
    let spec = tiny_spec();
    let weights = init_forecaster(&spec, 1).unwrap();
    let data = dataset_from(vec![(vec![0.1, 0.2, 0.3], 0.4)], 3);
    assert!(matches!(
        train(weights.clone(), &spec, &data, 0, OptimizerConfig::default(), 1),
        Err(NeuralError::ZeroEpochs)
    ));
    let empty = dataset_from(vec![], 3);
    assert!(matches!(
        train(weights, &spec, &empty, 1, OptimizerConfig::default(), 1),
        Err(NeuralError::EmptyDataset)
    ));
}

#[test]
fn train_is_deterministic() {
    let spec = tiny_spec();
    let weights = init_forecaster(&spec, 2).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let windows: Vec<(Vec<f64>, f64)> = (0..20)
        .map(|_| ((0..4).map(|_| rng.random::<f64>()).collect(), rng.random::<f64>()))
        .collect();
    let data = dataset_from(windows, 4);
    let a = train(weights.clone(), &spec, &data, 12, OptimizerConfig::default(), 9).unwrap();
    let b = train(weights, &spec, &data, 12, OptimizerConfig::default(), 9).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.sample_count, 20);
    assert_eq!(a.epoch_losses.len(), 12);
}

#[test]
fn constant_target_loss_is_monotone() {
    let spec = tiny_spec();
    let weights = init_forecaster(&spec, 4).unwrap();
    let windows: Vec<(Vec<f64>, f64)> = (0..16).map(|_| (vec![0.0; 6], 0.0)).collect();
    let data = dataset_from(windows, 6);
    let report = train(weights, &spec, &data, 50, OptimizerConfig::default(), 1).unwrap();
    for pair in report.epoch_losses.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "loss increased: {} -> {}", pair[0], pair[1]);
    }
}

#[test]
fn learns_window_mean_on_cluster_one_architecture() {
    // Targets are the window mean (a linear function of the input); the
    // cluster-1 shape (hidden 20, fc1 44, fc2 127) must reach under 1% of
    // target variance within 300 epochs.
    let spec = NetworkSpec { input_size: 1, lstm_hidden: 20, fc1_neurons: 44, fc2_neurons: 127, output_size: 1 };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let series: Vec<f64> = (0..88)
        .map(|t| 0.5 + 0.35 * (t as f64 * std::f64::consts::TAU / 96.0).sin() + 0.02 * rng.random::<f64>())
        .collect();
    let windows: Vec<(Vec<f64>, f64)> = (0..series.len() - 24)
        .map(|i| {
            let input = series[i..i + 24].to_vec();
            let mean = input.iter().sum::<f64>() / 24.0;
            (input, mean)
        })
        .collect();
    let targets: Vec<f64> = windows.iter().map(|(_, t)| *t).collect();
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let variance = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / targets.len() as f64;

    let data = dataset_from(windows, 24);
    let weights = init_forecaster(&spec, 13).unwrap();
    let report = train(weights, &spec, &data, 300, OptimizerConfig::default(), 13).unwrap();
    let final_loss = *report.epoch_losses.last().unwrap();
    assert!(
        final_loss < 0.01 * variance,
        "loss {final_loss} did not reach 1% of target variance {variance}"
    );
}

#[test]
fn session_resumes_exactly() {
    // Running 3 + 5 epochs through one session equals 8 epochs in one call.
    let spec = tiny_spec();
    let weights = init_forecaster(&spec, 6).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
    let windows: Vec<(Vec<f64>, f64)> = (0..10)
        .map(|_| ((0..4).map(|_| rng.random::<f64>()).collect(), rng.random::<f64>()))
        .collect();
    let data = dataset_from(windows, 4);

    let oracle = train(weights.clone(), &spec, &data, 8, OptimizerConfig::default(), 3).unwrap();

    let mut session = TrainingSession::new(weights, &spec, OptimizerConfig::default(), 3).unwrap();
    let mut losses = session.run_epochs(&data, 3).unwrap();
    losses.extend(session.run_epochs(&data, 5).unwrap());

    assert_eq!(losses, oracle.epoch_losses);
    assert_eq!(session.weights(), &oracle.weights);
}
