//! Dense three-layer perceptron.
//!
//! Every network in the pipeline has the same shape: two ReLU hidden layers
//! and a linear output layer. Weights are stored row-major as `(out, in)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmgError};

/// Hidden width used by every network in the pipeline.
pub const HIDDEN_WIDTH: usize = 256;

/// Number of affine layers in an [`Mlp`].
pub const NUM_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(out_dim, in_dim)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    /// Uniform in `±sqrt(1/fan_in)` for both weights and biases.
    fn uniform<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (1.0 / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng));
        let bias = Array1::from_shape_simple_fn(out_dim, || dist.sample(rng));
        Dense {
            weight,
            bias,
            activation,
        }
    }
}

/// Three affine layers: `in -> hidden (ReLU) -> hidden (ReLU) -> out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Seeded network with the standard hidden width.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::with_hidden(in_dim, HIDDEN_WIDTH, out_dim, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            layers: vec![
                Dense::uniform(in_dim, hidden, Activation::Relu, rng),
                Dense::uniform(hidden, hidden, Activation::Relu, rng),
                Dense::uniform(hidden, out_dim, Activation::Identity, rng),
            ],
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            layers: vec![
                Dense::zeros(in_dim, hidden, Activation::Relu),
                Dense::zeros(hidden, hidden, Activation::Relu),
                Dense::zeros(hidden, out_dim, Activation::Identity),
            ],
        }
    }

    /// Same shape as `self`, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim(), l.activation))
                .collect(),
        }
    }

    /// Validates layer count, activations, and shape chaining.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != NUM_LAYERS {
            return Err(VmgError::invalid(format!(
                "mlp needs exactly {NUM_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let expected = if i + 1 == NUM_LAYERS {
                Activation::Identity
            } else {
                Activation::Relu
            };
            if layer.activation != expected {
                return Err(VmgError::invalid(format!(
                    "layer {i} must use {expected:?} activation"
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(VmgError::invalid(format!(
                    "layer {i} bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(VmgError::invalid(format!(
                    "layer {} outputs {} values but layer {i} expects {}",
                    i - 1,
                    layers[i - 1].out_dim(),
                    layer.in_dim()
                )));
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

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[NUM_LAYERS - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return Err(VmgError::invalid(format!(
                "mlp expects {} inputs, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .expect("row vector shape");
        Ok(self.forward_batch(&x)?.into_raw_vec_and_offset().0)
    }

    /// Row-per-sample forward pass.
    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.in_dim() {
            return Err(VmgError::invalid(format!(
                "mlp expects {} input columns, got {}",
                self.in_dim(),
                input.ncols()
            )));
        }
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias.view().insert_axis(Axis(0));
            layer.activation.apply(&mut z);
            x = z;
        }
        Ok(x)
    }

    /// Named parameter groups in a fixed order: `layer{i}.weight`, `layer{i}.bias`.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * NUM_LAYERS);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.bias"),
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(2 * NUM_LAYERS);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                l.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.bias"),
                l.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len())
    }
}
