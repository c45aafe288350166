//! A fully connected network with softmax cross-entropy loss and
//! per-example backpropagation.
//!
//! Weights are stored `[in × out]` so that a layer computes
//! `z_j = Σ_i h_i W_ij + b_j`. Hidden layers use ReLU by default, whose
//! sub-gradient at zero is taken as zero; a logistic sigmoid is available for
//! experiments that need a twice-differentiable network.
//!
//! # Checkpoint format
//!
//! JSON with the fields `format` (`"dpdyn-mlp"`), `version` (1),
//! `activation` (`"relu"` or `"sigmoid"`, default relu), `layer_sizes`, and
//! `layers`, each layer holding `weight` (row-major
//! `in × out`) and `bias` arrays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::{par_map, RngStream, Tensor};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// First derivative at pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
        }
    }

    /// Second derivative at pre-activation `z` (zero almost everywhere for ReLU).
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

/// Weight and bias of one layer, or the gradient of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub type Layer = LayerGrad;

impl LayerGrad {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.bias.len()
    }

    /// ℓ₂ norm of weight and bias taken together as one vector.
    pub fn norm(&self) -> f64 {
        (self.weight.sum_sq() + self.bias.sum_sq()).sqrt()
    }

    pub fn sum_sq(&self) -> f64 {
        self.weight.sum_sq() + self.bias.sum_sq()
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.weight.scale_in_place(k);
        self.bias.scale_in_place(k);
    }

    fn same_shape(&self, other: &LayerGrad) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.shape() == other.bias.shape()
    }
}

/// Per-layer gradient tensors congruent with an [`MlpModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn from_layers(layers: Vec<LayerGrad>) -> Self {
        Self { layers }
    }

    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, m: usize) -> &LayerGrad {
        &self.layers[m]
    }

    pub fn layer_mut(&mut self, m: usize) -> &mut LayerGrad {
        &mut self.layers[m]
    }

    pub fn layers(&self) -> &[LayerGrad] {
        &self.layers
    }

    pub fn layer_norm(&self, m: usize) -> f64 {
        self.layers[m].norm()
    }

    pub fn sum_sq(&self) -> f64 {
        self.layers.iter().map(LayerGrad::sum_sq).sum()
    }

    pub fn is_congruent(&self, other: &GradientSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    fn check_congruent(&self, other: &GradientSet) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shapes(),
                actual: other.shapes(),
            })
        }
    }

    fn shapes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.fan_in(), l.fan_out()]).collect()
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            a.bias.add_assign(&b.bias)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.layers.iter_mut().for_each(|l| l.scale_in_place(k));
    }

    /// Σ of squared coordinate differences.
    pub fn distance_sq(&self, other: &GradientSet) -> Result<f64> {
        self.check_congruent(other)?;
        let mut d = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.weight.as_slice().iter().zip(b.weight.as_slice()) {
                d += (x - y) * (x - y);
            }
            for (x, y) in a.bias.as_slice().iter().zip(b.bias.as_slice()) {
                d += (x - y) * (x - y);
            }
        }
        Ok(d)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// `inputs[l]` is the input to layer `l` (so `inputs[0]` is `x`).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of every layer; the last entry holds the logits.
    pub pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
    #[serde(default)]
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(default)]
    activation: Activation,
    layer_sizes: Vec<usize>,
    layers: Vec<CheckpointLayer>,
}

const CHECKPOINT_FORMAT: &str = "dpdyn-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Glorot-uniform weights, zero biases, ReLU hidden layers.
pub fn init_mlp(layer_sizes: &[usize], rng: &mut RngStream) -> Result<MlpModel> {
    init_mlp_with(layer_sizes, Activation::Relu, rng)
}

/// Glorot-uniform weights and zero biases with the given hidden activation.
pub fn init_mlp_with(
    layer_sizes: &[usize],
    activation: Activation,
    rng: &mut RngStream,
) -> Result<MlpModel> {
    if layer_sizes.len() < 3 || layer_sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "need at least three positive layer sizes, got {layer_sizes:?}"
        )));
    }
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
            Layer {
                weight: Tensor::from_parts(vec![fan_in, fan_out], weight),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(MlpModel { layers, activation })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl MlpModel {
    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        for (m, l) in layers.iter().enumerate() {
            let (fan_in, fan_out) = l.weight.dims2()?;
            if l.bias.len() != fan_out {
                return Err(Error::ShapeMismatch {
                    expected: vec![fan_out],
                    actual: vec![l.bias.len()],
                });
            }
            if m > 0 && layers[m - 1].fan_out() != fan_in {
                return Err(Error::ShapeMismatch {
                    expected: vec![layers[m - 1].fan_out()],
                    actual: vec![fan_in],
                });
            }
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::fan_out))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.input_dim()],
                actual: vec![x.len()],
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let m = self.layers.len();
        let mut inputs = Vec::with_capacity(m);
        let mut pre = Vec::with_capacity(m);
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.tmatvec(&h)?;
            for (zj, bj) in z.iter_mut().zip(layer.bias.as_slice()) {
                *zj += bj;
            }
            let next = if l + 1 < m {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(Trace { inputs, pre })
    }

    /// Logits for input `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.pre.pop().unwrap_or_default())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(cross_entropy(&self.forward(x)?, label))
    }

    /// Backpropagates `dlogits` through a recorded trace.
    pub(crate) fn backward(&self, trace: &Trace, dlogits: Vec<f64>) -> GradientSet {
        let m = self.layers.len();
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(m);
        let mut delta = dlogits;
        for l in (0..m).rev() {
            let h = &trace.inputs[l];
            let fan_out = delta.len();
            let mut w = vec![0.0; h.len() * fan_out];
            for (i, &hi) in h.iter().enumerate() {
                if hi != 0.0 {
                    let row = &mut w[i * fan_out..(i + 1) * fan_out];
                    for (r, &d) in row.iter_mut().zip(&delta) {
                        *r = hi * d;
                    }
                }
            }
            let next = if l > 0 {
                let back = self.layers[l]
                    .weight
                    .matvec(&delta)
                    .expect("trace shapes match the model");
                back.iter()
                    .zip(&trace.pre[l - 1])
                    .map(|(&g, &z)| g * self.activation.derivative(z))
                    .collect()
            } else {
                Vec::new()
            };
            grads.push(LayerGrad {
                weight: Tensor::from_parts(vec![h.len(), fan_out], w),
                bias: Tensor::from_parts(vec![fan_out], delta),
            });
            delta = next;
        }
        grads.reverse();
        GradientSet::from_layers(grads)
    }

    /// Gradient of `scale · L(x, label)` and the unscaled loss.
    pub fn scaled_gradient(&self, x: &[f64], label: usize, scale: f64) -> Result<(GradientSet, f64)> {
        self.check_label(label)?;
        let trace = self.trace(x)?;
        let logits = trace.pre.last().expect("at least one layer");
        let loss = cross_entropy(logits, label);
        let mut dlogits = softmax(logits);
        dlogits[label] -= 1.0;
        dlogits.iter_mut().for_each(|v| *v *= scale);
        Ok((self.backward(&trace, dlogits), loss))
    }

    /// Gradient of the cross-entropy loss of one example, without any batch
    /// prefactor.
    pub fn example_gradient(&self, x: &[f64], label: usize) -> Result<GradientSet> {
        Ok(self.scaled_gradient(x, label, 1.0)?.0)
    }

    /// One gradient of `(1/B) · L(x_i, y_i)` per example, in batch order.
    pub fn per_example_gradients(&self, inputs: &[&[f64]], labels: &[usize]) -> Result<Vec<GradientSet>> {
        if inputs.is_empty() {
            return Err(Error::invalid("per-example gradients of an empty batch"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![inputs.len()],
                actual: vec![labels.len()],
            });
        }
        let scale = 1.0 / inputs.len() as f64;
        par_map(inputs.len(), |i| {
            self.scaled_gradient(inputs[i], labels[i], scale).map(|(g, _)| g)
        })
        .into_iter()
        .collect()
    }

    /// `W ← W − η·g`.
    pub fn apply_update(&mut self, grad: &GradientSet, lr: f64) -> Result<()> {
        let reference = GradientSet::from_layers(self.layers.clone());
        reference.check_congruent(grad)?;
        for (layer, g) in self.layers.iter_mut().zip(grad.layers()) {
            for (w, d) in layer.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *w -= lr * d;
            }
            for (b, d) in layer.bias.as_mut_slice().iter_mut().zip(g.bias.as_slice()) {
                *b -= lr * d;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            activation: self.activation,
            layer_sizes: self.layer_sizes(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weight: l.weight.as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.layer_sizes.len() != ck.layers.len() + 1 {
            return Err(Error::invalid("checkpoint layer_sizes does not match its layers"));
        }
        let layers = ck
            .layers
            .into_iter()
            .zip(ck.layer_sizes.windows(2))
            .map(|(l, w)| {
                Ok(Layer {
                    weight: Tensor::new(vec![w[0], w[1]], l.weight)?,
                    bias: Tensor::new(vec![w[1]], l.bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(layers)?.with_activation(ck.activation))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Accuracy and mean cross-entropy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

pub fn evaluate(model: &MlpModel, ds: &Dataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let rows: Vec<(bool, f64)> = par_map(ds.len(), |i| {
        let (x, y) = ds.example(i);
        let logits = model.forward(x)?;
        if y >= logits.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: logits.len(),
            });
        }
        Ok((argmax(&logits) == y, cross_entropy(&logits, y)))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let correct = rows.iter().filter(|r| r.0).count();
    let loss: f64 = rows.iter().map(|r| r.1).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        mean_loss: loss / ds.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Purpose;

    fn small_model(seed: u64) -> MlpModel {
        let mut rng = RngStream::new(seed, Purpose::Init, 0, 0);
        init_mlp(&[5, 4, 3, 3], &mut rng).unwrap()
    }

    #[test]
    fn parameter_count_and_glorot_range() {
        let mut rng = RngStream::new(0, Purpose::Init, 0, 0);
        let m = init_mlp(&[784, 128, 10], &mut rng).unwrap();
        assert_eq!(m.num_parameters(), 784 * 128 + 128 + 128 * 10 + 10);
        let limit = (6.0f64 / (784.0 + 128.0)).sqrt();
        assert!(m.layers()[0].weight.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(m.layers()[1].bias.as_slice().iter().all(|&b| b == 0.0));
        assert!(init_mlp(&[784, 10], &mut rng).is_err());
        assert!(init_mlp(&[4, 0, 2], &mut rng).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small_model(3), small_model(3));
        assert_ne!(small_model(3), small_model(4));
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let layers = vec![LayerGrad::zeros(3, 2), LayerGrad::zeros(2, 2)];
        let m = MlpModel::from_layers(layers).unwrap();
        assert_eq!(m.forward(&[0.3, -1.0, 7.0]).unwrap(), vec![0.0, 0.0]);
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn output_layer_gradient_is_softmax_minus_onehot() {
        let m = small_model(1);
        let x = [0.1, 0.9, 0.4, 0.0, 0.5];
        let g = m.example_gradient(&x, 2).unwrap();
        let mut p = softmax(&m.forward(&x).unwrap());
        p[2] -= 1.0;
        assert_eq!(g.layer(2).bias.as_slice(), &p[..]);
    }

    #[test]
    fn per_example_gradients_carry_batch_prefactor() {
        let m = small_model(2);
        let x = [0.2, 0.3, 0.1, 0.8, 0.6];
        let gs = m.per_example_gradients(&[&x, &x], &[1, 1]).unwrap();
        assert_eq!(gs[0], gs[1]);
        let mut raw = m.example_gradient(&x, 1).unwrap();
        raw.scale_in_place(0.5);
        assert!(raw.distance_sq(&gs[0]).unwrap() < 1e-30);
        assert!(matches!(
            m.per_example_gradients(&[&x], &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(m.per_example_gradients(&[], &[]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = small_model(5);
        let back = MlpModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let sig = m.with_activation(Activation::Sigmoid);
        assert_eq!(MlpModel::from_json(&sig.to_json().unwrap()).unwrap(), sig);
        assert!(MlpModel::from_json("{\"format\":\"other\",\"version\":1,\"layer_sizes\":[],\"layers\":[]}").is_err());
    }

    #[test]
    fn update_moves_against_gradient() {
        let mut m = small_model(6);
        let x = [0.5, 0.5, 0.5, 0.5, 0.5];
        let before = m.loss(&x, 0).unwrap();
        let g = m.example_gradient(&x, 0).unwrap();
        m.apply_update(&g, 0.05).unwrap();
        assert!(m.loss(&x, 0).unwrap() < before);
    }
}
