//! Dense ReLU network with batched reverse-mode gradients, the Adam optimizer
//! and the input normalizer used by the closure models.
//!
//! Batches are row-major: a batch of `B` inputs is a `B x d_in` matrix and each
//! layer computes `Z = X W + b` with `W` stored as `d_in x d_out`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor applied to normalizer standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Fully connected network, ReLU on hidden layers and identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l` (post-activation of layer `l-1`).
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// He-uniform initialization: `W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in))`, `b = 0`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut mlp = Mlp::zeros(dims)?;
        for layer in &mut mlp.layers {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        Ok(mlp)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(invalid!("layer dims must have at least two positive entries, got {dims:?}"));
        }
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid!("network needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(invalid!(
                    "layer {l}: bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.fan_out()
                ));
            }
            if l > 0 && layers[l - 1].fan_out() != layer.fan_in() {
                return Err(invalid!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    layer.fan_in(),
                    l - 1,
                    layers[l - 1].fan_out()
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(invalid!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            ));
        }
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.forward_batch(batch).into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            h = affine(&h.view(), layer);
            if l < last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(&h.view(), layer);
            inputs.push(h);
            h = if l < last { z.mapv(relu) } else { z };
        }
        ForwardCache { inputs, output: h }
    }

    /// Gradients of `sum_b <output_b, upstream_b>` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            grads.push(Dense {
                weight: input.t().dot(&delta).as_standard_layout().into_owned(),
                bias: delta.sum_axis(Axis(0)),
            });
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weight.t());
                // input[l] = relu(z_{l-1}), so the mask is input > 0
                ndarray::Zip::from(&mut back)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = back;
            }
        }
        grads.reverse();
        grads
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn affine(x: &ArrayView2<f64>, layer: &Dense) -> Array2<f64> {
    let mut z = x.dot(&layer.weight);
    z += &layer.bias;
    z
}

/// Adam with bias correction, acting on flat parameter slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One update with step counter `t >= 1`.
    pub fn update(&mut self, cfg: &AdamConfig, t: u64, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Adam over all tensors of an [`Mlp`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(mlp: &Mlp, config: AdamConfig) -> Self {
        let states = mlp
            .layers
            .iter()
            .flat_map(|l| [AdamState::new(l.weight.len()), AdamState::new(l.bias.len())])
            .collect();
        Adam {
            config,
            step: 0,
            states,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &[Dense], lr: f64) {
        self.step += 1;
        let t = self.step;
        let mut states = self.states.iter_mut();
        for (layer, grad) in mlp.layers.iter_mut().zip(grads) {
            let sw = states.next().expect("state per weight");
            sw.update(
                &self.config,
                t,
                layer.weight.as_slice_mut().expect("standard layout"),
                grad.weight.as_slice().expect("standard layout"),
                lr,
            );
            let sb = states.next().expect("state per bias");
            sb.update(
                &self.config,
                t,
                layer.bias.as_slice_mut().expect("standard layout"),
                grad.bias.as_slice().expect("standard layout"),
                lr,
            );
        }
    }
}

/// Componentwise standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation of each column.
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(invalid!("cannot fit a normalizer on zero rows"));
        }
        let n = data.nrows() as f64;
        let mean: Vec<f64> = data.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let std = data
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, &mu)| {
                let var = col.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn denormalize(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        out
    }
}
