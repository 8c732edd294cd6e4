//! Feed-forward classifier with rectified hidden layers and linear output.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textfmt;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Dense layer `y = W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(&mut self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::invalid(format!(
            "layer dims need at least an input and an output size, all positive; got {dims:?}"
        )));
    }
    Ok(())
}

/// Per-layer intermediate values kept for backpropagation.
pub(crate) struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace holds at least the input")
    }
}

impl MlpModel {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers: layer_dims
                .windows(2)
                .map(|w| Layer::zeros(w[0], w[1]))
                .collect(),
        })
    }

    /// Every parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(layer_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for p in layer.params_mut() {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Ok(model)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::invalid("a model needs at least one layer"));
        };
        let mut dims = vec![first.inputs];
        for l in &layers {
            if l.inputs != *dims.last().unwrap() {
                return Err(Error::Shape {
                    expected: *dims.last().unwrap(),
                    got: l.inputs,
                });
            }
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::invalid(format!(
                    "layer {}x{} has {} weights and {} biases",
                    l.outputs,
                    l.inputs,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            dims.push(l.outputs);
        }
        check_dims(&dims)?;
        let model = Self {
            layer_dims: dims,
            layers,
        };
        if !model.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Layer::params_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        let mut cur = features.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i + 1 < self.layers.len() {
                relu(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn trace(&self, features: &[f64]) -> Result<Trace> {
        self.check_input(features)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(features.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(acts.last().unwrap(), &mut out);
            if i + 1 < self.layers.len() {
                relu(&mut out);
            }
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    /// Adds the parameter gradient for one sample, given `dL/dlogits`.
    pub(crate) fn accumulate_grad(&self, trace: &Trace, d_logits: &[f64], grads: &mut Gradients) {
        let mut delta = d_logits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.acts[l];
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &a) in row.iter_mut().zip(input) {
                    *w += d * a;
                }
            }
            if l == 0 {
                break;
            }
            // hidden activations are relu outputs: the derivative is 1 where positive
            let mut back = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (b, &w) in back.iter_mut().zip(row) {
                    *b += w * d;
                }
            }
            for (b, &a) in back.iter_mut().zip(input) {
                if a <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
    }

    /// One gradient step: `p -= lr * (g + weight_decay * p)`, with decay on
    /// weights only.
    pub(crate) fn sgd_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * (gw + weight_decay * *w);
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layer_dims: self.layer_dims.clone(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
        };
        let mut s = textfmt::to_line(&file);
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        check_dims(&file.layer_dims)?;
        let n = file.layer_dims.len() - 1;
        if file.weights.len() != n || file.biases.len() != n {
            return Err(Error::invalid(format!(
                "{n} layers declared but {} weight and {} bias arrays found",
                file.weights.len(),
                file.biases.len()
            )));
        }
        let layers = file
            .layer_dims
            .windows(2)
            .zip(file.weights.into_iter().zip(file.biases))
            .map(|(w, (weights, bias))| Layer {
                inputs: w[0],
                outputs: w[1],
                weights,
                bias,
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Parameter gradients laid out exactly like the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::params)
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            for p in l.params_mut() {
                *p *= k;
            }
        }
    }
}

/// Parses `"2,64,64,2"` into layer sizes.
pub fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::invalid(format!("bad layer size '{p}': {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    check_dims(&dims)?;
    Ok(dims)
}
