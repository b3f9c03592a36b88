//! Per-sensor confidence estimator: a small fully connected ReLU network
//! mapping a voxel's feature vector to a nonnegative confidence weight.
//!
//! Freshly initialized networks output exactly 1 for every input (final
//! weights start at zero with bias one), so all sensors begin equally
//! trusted and training only has to learn deviations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default hidden widths behind the feature input layer.
pub const DEFAULT_HIDDEN_WIDTHS: [usize; 5] = [100, 50, 20, 10, 1];

/// Fully connected network parameters. `widths[0]` is the feature dimension
/// and the chain ends in a single confidence output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub sensor_name: String,
    pub widths: Vec<usize>,
    /// Per layer, row-major `out x in`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Gradients shaped like [`MlpParams`], plus the input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl MlpParams {
    /// Layer widths for a sensor with feature dimension `dim`.
    pub fn default_widths(dim: usize) -> Vec<usize> {
        let mut w = vec![dim];
        w.extend_from_slice(&DEFAULT_HIDDEN_WIDTHS);
        w
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            input: vec![0.0; params.input_dim()],
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(other.input.iter()) {
            *x += scale * y;
        }
    }
}

/// He-initializes hidden layers from the seed; the final layer starts with
/// zero weights and bias one so the initial confidence is exactly 1.
pub fn init_params(seed: u64, widths: &[usize], sensor_name: &str) -> Result<MlpParams> {
    if widths.len() < 2 {
        return Err(Error::contract("network needs at least one layer"));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::contract(format!(
            "layer widths must end in 1, got {widths:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = widths.len() - 1;
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        if l + 1 == n_layers {
            weights.push(vec![0.0; fan_out * fan_in]);
            biases.push(vec![1.0; fan_out]);
        } else {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            weights.push((0..fan_out * fan_in).map(|_| normal.sample(&mut rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
    }
    Ok(MlpParams {
        sensor_name: sensor_name.to_string(),
        widths: widths.to_vec(),
        weights,
        biases,
    })
}

/// Reusable activation buffers for a fixed architecture.
#[derive(Clone, Debug)]
pub struct MlpScratch {
    /// `acts[0]` is the input copy; `acts[l + 1]` the post-ReLU output of
    /// layer `l`.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl MlpScratch {
    pub fn for_params(params: &MlpParams) -> Self {
        Self {
            acts: params.widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: params.widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

fn forward_into(params: &MlpParams, features: &[f64], scratch: &mut MlpScratch) -> f64 {
    scratch.acts[0].copy_from_slice(features);
    for l in 0..params.n_layers() {
        let (n_in, n_out) = (params.widths[l], params.widths[l + 1]);
        let w = &params.weights[l];
        let b = &params.biases[l];
        let (inputs, outputs) = {
            let (head, tail) = scratch.acts.split_at_mut(l + 1);
            (&head[l], &mut tail[0])
        };
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut v = b[o];
            for (wi, xi) in row.iter().zip(inputs.iter()) {
                v += wi * xi;
            }
            outputs[o] = v.max(0.0); // ReLU after every layer, incl. the last
        }
    }
    scratch.acts[params.n_layers()][0]
}

/// Confidence for one feature vector. Nonnegative by construction.
pub fn forward(params: &MlpParams, features: &[f64]) -> Result<f64> {
    if features.len() != params.input_dim() {
        return Err(Error::contract(format!(
            "feature dimension {} does not match network input {}",
            features.len(),
            params.input_dim()
        )));
    }
    let mut scratch = MlpScratch::for_params(params);
    Ok(forward_into(params, features, &mut scratch))
}

/// Forward pass reusing caller-owned buffers; used in per-voxel loops.
pub fn forward_scratch(params: &MlpParams, features: &[f64], scratch: &mut MlpScratch) -> f64 {
    forward_into(params, features, scratch)
}

/// Accumulates exact gradients of `upstream * confidence` with respect to all
/// parameters and the input into `grads`. Recomputes the forward pass into
/// `scratch`. The ReLU subgradient at exactly 0 is taken as 0.
pub fn backward_accumulate(
    params: &MlpParams,
    features: &[f64],
    upstream: f64,
    scratch: &mut MlpScratch,
    grads: &mut MlpGradients,
) {
    forward_into(params, features, scratch);
    let n_layers = params.n_layers();
    // The per-layer loop gates each delta by its own ReLU, including the
    // output layer's.
    scratch.deltas[n_layers][0] = upstream;
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (params.widths[l], params.widths[l + 1]);
        let w = &params.weights[l];
        let (delta_in_buf, delta_out_buf) = {
            let (head, tail) = scratch.deltas.split_at_mut(l + 1);
            (&mut head[l], &tail[0])
        };
        for d in delta_in_buf.iter_mut() {
            *d = 0.0;
        }
        let inputs = &scratch.acts[l];
        let outputs = &scratch.acts[l + 1];
        let gw = &mut grads.weights[l];
        let gb = &mut grads.biases[l];
        for o in 0..n_out {
            // delta at the post-ReLU output, gated by the ReLU derivative.
            let d = if outputs[o] > 0.0 { delta_out_buf[o] } else { 0.0 };
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += d * inputs[i];
                delta_in_buf[i] += d * row[i];
            }
        }
    }
    for (g, d) in grads.input.iter_mut().zip(scratch.deltas[0].iter()) {
        *g += d;
    }
}

/// Exact gradients of the confidence with respect to parameters and input,
/// scaled by `upstream`.
pub fn backward(params: &MlpParams, features: &[f64], upstream: f64) -> MlpGradients {
    let mut scratch = MlpScratch::for_params(params);
    let mut grads = MlpGradients::zeros_like(params);
    backward_accumulate(params, features, upstream, &mut scratch, &mut grads);
    grads
}
