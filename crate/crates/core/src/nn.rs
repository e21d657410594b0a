//! Dense feed-forward networks: forward pass, exact reverse-mode gradients
//! and Adam. Used for both the Q-network and the federated task model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    /// One activation per weight layer (`layer_sizes.len() - 1` entries).
    pub activations: Vec<Activation>,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activations,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Relu hidden layers followed by an output layer with `output_activation`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, output_activation: Activation) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(output_activation);
        Self::new(sizes, acts)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Err(Error::InvalidConfig(format!("network spec: {msg}")));
        if self.layer_sizes.len() < 2 {
            return invalid("needs at least input and output layers");
        }
        if self.layer_sizes.contains(&0) {
            return invalid("layer sizes must be positive");
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return invalid("one activation per weight layer");
        }
        let last = self.activations.len() - 1;
        if self.activations[..last].contains(&Activation::Softmax) {
            return invalid("softmax is only allowed at the output");
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Weights of one affine layer, row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameters {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

/// Activations recorded by [`Parameters::forward`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by every layer's post-activation output.
    outputs: Vec<Vec<f64>>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("non-empty cache")
    }
}

/// Gradient with the same shape as [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += *b;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Layer::values_mut)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

fn apply_activation(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => softmax_in_place(z),
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

impl Parameters {
    /// He-uniform weights for relu layers, Xavier-uniform otherwise; zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = init_bound(act, fan_in, fan_out);
                let mut layer = Layer::zeros(fan_in, fan_out);
                layer
                    .weights
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..=bound));
                layer
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
            version: 0,
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
            version: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(Layer::values).copied().collect()
    }

    pub fn from_flat(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        if flat.len() != spec.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: spec.num_params(),
                actual: flat.len(),
            });
        }
        for (dst, src) in params.layers.iter_mut().flat_map(Layer::values_mut).zip(flat) {
            *dst = *src;
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(Layer::values).all(|v| v.is_finite())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_size() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.spec.input_size(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Output only, without recording activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        for (layer, &act) in self.layers.iter().zip(&self.spec.activations) {
            current = affine(layer, &current);
            apply_activation(act, &mut current);
        }
        Ok(current)
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(input.to_vec());
        for (layer, &act) in self.layers.iter().zip(&self.spec.activations) {
            let mut z = affine(layer, outputs.last().expect("input pushed"));
            apply_activation(act, &mut z);
            outputs.push(z);
        }
        Ok(ForwardCache {
            outputs,
            version: self.version,
        })
    }

    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates the gradient of the loss whose output gradient is
    /// `output_grad` into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, output_grad: &[f64], grads: &mut Gradients) -> Result<()> {
        if cache.version != self.version || cache.outputs.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache);
        }
        if output_grad.len() != self.spec.output_size() {
            return Err(Error::DimensionMismatch {
                context: "output gradient",
                expected: self.spec.output_size(),
                actual: output_grad.len(),
            });
        }
        let mut delta = output_grad.to_vec();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let out = &cache.outputs[idx + 1];
            // through the activation: delta becomes dL/dz
            match self.spec.activations[idx] {
                Activation::Identity => {}
                Activation::Relu => {
                    for (d, &o) in delta.iter_mut().zip(out) {
                        if o <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Softmax => {
                    let dot: f64 = delta.iter().zip(out).map(|(d, p)| d * p).sum();
                    for (d, &p) in delta.iter_mut().zip(out) {
                        *d = p * (*d - dot);
                    }
                }
            }
            let input = &cache.outputs[idx];
            let g = &mut grads.layers[idx];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if idx > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

fn init_bound(act: Activation, fan_in: usize, fan_out: usize) -> f64 {
    match act {
        Activation::Relu => (6.0 / fan_in as f64).sqrt(),
        _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    }
}

fn affine(layer: &Layer, input: &[f64]) -> Vec<f64> {
    layer
        .weights
        .chunks_exact(layer.inputs)
        .zip(&layer.bias)
        .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &Parameters, learning_rate: f64) -> Self {
        let n = params.spec.num_params();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Parameters, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let n = params.spec.num_params();
    if state.first.len() != n || grads.values().count() != n {
        return Err(Error::DimensionMismatch {
            context: "adam state",
            expected: n,
            actual: state.first.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    let values = params.layers_mut().iter_mut().flat_map(Layer::values_mut);
    for (((p, g), m), v) in values
        .zip(grads.values())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Mean squared error over the masked outputs; returns the loss and its
/// gradient with respect to `pred` (zero outside the mask).
pub fn loss_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            context: "mse operands",
            expected: pred.len(),
            actual: target.len().min(mask.len()),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), &m)| {
            if m {
                let diff = p - t;
                loss += diff * diff * scale;
                2.0 * diff * scale
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Probabilities below this are clipped before taking the log.
const PROB_FLOOR: f64 = 1e-12;

/// Negative log-likelihood of `label` and its gradient with respect to `probs`.
pub fn loss_cross_entropy(probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probs.len() {
        return Err(Error::DimensionMismatch {
            context: "class label",
            expected: probs.len(),
            actual: label,
        });
    }
    let p = probs[label].max(PROB_FLOOR);
    let mut grad = vec![0.0; probs.len()];
    grad[label] = -1.0 / p;
    Ok((-p.ln(), grad))
}
