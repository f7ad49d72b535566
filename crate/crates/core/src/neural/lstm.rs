//! Forward pass and backpropagation through time for the forecaster.
//!
//! The network is a single LSTM layer over the input window followed by two
//! ReLU dense layers and a linear scalar output. All math runs on the flat
//! value array of a `ParameterVector`; `Layout` maps tensor names to offsets.

use crate::neural::NetworkSpec;

/// Offsets of every tensor inside the flat parameter array.
///
/// Gate rows within the `4*hidden` LSTM blocks are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub hidden: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub w_ih: usize,
    pub w_hh: usize,
    pub bias: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(spec: &NetworkSpec) -> Self {
        let h = spec.lstm_hidden;
        let gates = 4 * h;
        let w_ih = 0;
        let w_hh = w_ih + gates * spec.input_size;
        let bias = w_hh + gates * h;
        let fc1_w = bias + gates;
        let fc1_b = fc1_w + spec.fc1_neurons * h;
        let fc2_w = fc1_b + spec.fc1_neurons;
        let fc2_b = fc2_w + spec.fc2_neurons * spec.fc1_neurons;
        let out_w = fc2_b + spec.fc2_neurons;
        let out_b = out_w + spec.output_size * spec.fc2_neurons;
        let total = out_b + spec.output_size;
        Self {
            hidden: h,
            fc1: spec.fc1_neurons,
            fc2: spec.fc2_neurons,
            w_ih,
            w_hh,
            bias,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            out_w,
            out_b,
            total,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-timestep intermediates kept for the backward pass.
pub(crate) struct StepTrace {
    x: f64,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub(crate) struct ForwardTrace {
    steps: Vec<StepTrace>,
    h_last: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    pub y: f64,
}

/// Runs one LSTM step in place, returning the post-activation gates.
#[inline]
#[allow(clippy::too_many_arguments)]
fn lstm_step(
    values: &[f64],
    layout: &Layout,
    x: f64,
    h: &mut [f64],
    c: &mut [f64],
    gate_i: &mut [f64],
    gate_f: &mut [f64],
    gate_g: &mut [f64],
    gate_o: &mut [f64],
    tanh_c: &mut [f64],
) {
    let hsize = layout.hidden;
    let w_ih = &values[layout.w_ih..layout.w_ih + 4 * hsize];
    let w_hh = &values[layout.w_hh..layout.w_hh + 4 * hsize * hsize];
    let bias = &values[layout.bias..layout.bias + 4 * hsize];

    for j in 0..hsize {
        // Rows for each gate block of unit j.
        let rows = [j, hsize + j, 2 * hsize + j, 3 * hsize + j];
        let mut pre = [0.0f64; 4];
        for (slot, &r) in rows.iter().enumerate() {
            let mut acc = bias[r] + w_ih[r] * x;
            let row = &w_hh[r * hsize..(r + 1) * hsize];
            for k in 0..hsize {
                acc += row[k] * h[k];
            }
            pre[slot] = acc;
        }
        gate_i[j] = sigmoid(pre[0]);
        gate_f[j] = sigmoid(pre[1]);
        gate_g[j] = pre[2].tanh();
        gate_o[j] = sigmoid(pre[3]);
        c[j] = gate_f[j] * c[j] + gate_i[j] * gate_g[j];
        tanh_c[j] = c[j].tanh();
    }
    for j in 0..hsize {
        h[j] = gate_o[j] * tanh_c[j];
    }
}

fn dense_head(values: &[f64], layout: &Layout, h_last: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let hsize = layout.hidden;
    let f1 = layout.fc1;
    let f2 = layout.fc2;

    let mut z1 = vec![0.0; f1];
    let mut a1 = vec![0.0; f1];
    for p in 0..f1 {
        let row = &values[layout.fc1_w + p * hsize..layout.fc1_w + (p + 1) * hsize];
        let mut acc = values[layout.fc1_b + p];
        for k in 0..hsize {
            acc += row[k] * h_last[k];
        }
        z1[p] = acc;
        a1[p] = acc.max(0.0);
    }

    let mut z2 = vec![0.0; f2];
    let mut a2 = vec![0.0; f2];
    for q in 0..f2 {
        let row = &values[layout.fc2_w + q * f1..layout.fc2_w + (q + 1) * f1];
        let mut acc = values[layout.fc2_b + q];
        for p in 0..f1 {
            acc += row[p] * a1[p];
        }
        z2[q] = acc;
        a2[q] = acc.max(0.0);
    }

    let mut y = values[layout.out_b];
    let out_row = &values[layout.out_w..layout.out_w + f2];
    for q in 0..f2 {
        y += out_row[q] * a2[q];
    }
    (z1, a1, z2, a2, y)
}

/// Scalar prediction for one window; hidden and cell state start at zero.
pub(crate) fn forward_value(values: &[f64], layout: &Layout, window: &[f64]) -> f64 {
    let hsize = layout.hidden;
    let mut h = vec![0.0; hsize];
    let mut c = vec![0.0; hsize];
    let mut gi = vec![0.0; hsize];
    let mut gf = vec![0.0; hsize];
    let mut gg = vec![0.0; hsize];
    let mut go = vec![0.0; hsize];
    let mut tc = vec![0.0; hsize];
    for &x in window {
        lstm_step(values, layout, x, &mut h, &mut c, &mut gi, &mut gf, &mut gg, &mut go, &mut tc);
    }
    dense_head(values, layout, &h).4
}

/// Forward pass that records everything the backward pass needs.
pub(crate) fn forward_trace(values: &[f64], layout: &Layout, window: &[f64]) -> ForwardTrace {
    let hsize = layout.hidden;
    let mut h = vec![0.0; hsize];
    let mut c = vec![0.0; hsize];
    let mut steps = Vec::with_capacity(window.len());

    for &x in window {
        let h_prev = h.clone();
        let c_prev = c.clone();
        let mut gi = vec![0.0; hsize];
        let mut gf = vec![0.0; hsize];
        let mut gg = vec![0.0; hsize];
        let mut go = vec![0.0; hsize];
        let mut tc = vec![0.0; hsize];
        lstm_step(values, layout, x, &mut h, &mut c, &mut gi, &mut gf, &mut gg, &mut go, &mut tc);
        steps.push(StepTrace {
            x,
            h_prev,
            c_prev,
            gate_i: gi,
            gate_f: gf,
            gate_g: gg,
            gate_o: go,
            tanh_c: tc,
        });
    }

    let (z1, a1, z2, a2, y) = dense_head(values, layout, &h);
    ForwardTrace { steps, h_last: h, z1, a1, z2, a2, y }
}

/// Accumulates `d(loss)/d(params)` into `grad` for one sample, given
/// `dy = d(loss)/d(prediction)`. `grad` must be `layout.total` long.
pub(crate) fn backward(values: &[f64], layout: &Layout, trace: &ForwardTrace, dy: f64, grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), layout.total);
    let hsize = layout.hidden;
    let f1 = layout.fc1;
    let f2 = layout.fc2;

    // Output layer.
    grad[layout.out_b] += dy;
    let mut da2 = vec![0.0; f2];
    for q in 0..f2 {
        grad[layout.out_w + q] += dy * trace.a2[q];
        da2[q] = values[layout.out_w + q] * dy;
    }

    // fc2 (ReLU).
    let mut da1 = vec![0.0; f1];
    for q in 0..f2 {
        if trace.z2[q] <= 0.0 {
            continue;
        }
        let dz2 = da2[q];
        grad[layout.fc2_b + q] += dz2;
        let row = layout.fc2_w + q * f1;
        let w_row = &values[row..row + f1];
        for p in 0..f1 {
            grad[row + p] += dz2 * trace.a1[p];
            da1[p] += w_row[p] * dz2;
        }
    }

    // fc1 (ReLU).
    let mut dh = vec![0.0; hsize];
    for p in 0..f1 {
        if trace.z1[p] <= 0.0 {
            continue;
        }
        let dz1 = da1[p];
        grad[layout.fc1_b + p] += dz1;
        let row = layout.fc1_w + p * hsize;
        let w_row = &values[row..row + hsize];
        for k in 0..hsize {
            grad[row + k] += dz1 * trace.h_last[k];
            dh[k] += w_row[k] * dz1;
        }
    }

    // Backpropagation through time. `dh` carries the gradient flowing into
    // h_t; at the last step that is the dense-head gradient, below it only
    // the recurrent contribution.
    let w_hh = &values[layout.w_hh..layout.w_hh + 4 * hsize * hsize];
    let mut dc_next = vec![0.0; hsize];
    let mut d_pre = vec![0.0; 4 * hsize];

    for step in trace.steps.iter().rev() {
        for j in 0..hsize {
            let tc = step.tanh_c[j];
            let dc = dh[j] * step.gate_o[j] * (1.0 - tc * tc) + dc_next[j];
            let gi = step.gate_i[j];
            let gf = step.gate_f[j];
            let gg = step.gate_g[j];
            let go = step.gate_o[j];
            d_pre[j] = dc * gg * gi * (1.0 - gi);
            d_pre[hsize + j] = dc * step.c_prev[j] * gf * (1.0 - gf);
            d_pre[2 * hsize + j] = dc * gi * (1.0 - gg * gg);
            d_pre[3 * hsize + j] = dh[j] * tc * go * (1.0 - go);
            dc_next[j] = dc * gf;
        }

        for r in 0..4 * hsize {
            let dp = d_pre[r];
            grad[layout.w_ih + r] += dp * step.x;
            grad[layout.bias + r] += dp;
            let row = layout.w_hh + r * hsize;
            for k in 0..hsize {
                grad[row + k] += dp * step.h_prev[k];
            }
        }

        for k in 0..hsize {
            let mut acc = 0.0;
            for r in 0..4 * hsize {
                acc += w_hh[r * hsize + k] * d_pre[r];
            }
            dh[k] = acc;
        }
    }
}
