//! Fully connected Q-network with hand-written backpropagation and Adam.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action;

pub const CHECKPOINT_FORMAT: &str = "qse-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint does not match the expected schema: {0}")]
    SchemaMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_size: usize,
    pub hidden: Vec<usize>,
    pub output_size: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpSpec {
    /// Two hidden ReLU layers of 128 units.
    pub fn default_for(input_size: usize, init_seed: u64) -> Self {
        Self {
            input_size,
            hidden: vec![128, 128],
            output_size: Action::COUNT,
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_size == 0 || self.output_size == 0 || self.hidden.contains(&0) {
            return Err(NnError::ShapeMismatch(
                "every layer width must be at least 1".into(),
            ));
        }
        if self.output_size != Action::COUNT {
            return Err(NnError::ShapeMismatch(format!(
                "output size must equal the {} actions, got {}",
                Action::COUNT,
                self.output_size
            )));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_size)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_size))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major as out × in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().zip(self.weights.chunks_exact(self.inputs)).map(
            |(b, row)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>(),
        ));
    }
}

/// Network parameters. The forward pass never mutates them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

/// Per-parameter gradients (or optimizer moments), shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    /// All entries, weights before biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }
}

impl Mlp {
    /// Fan-in scaled uniform initialization from `spec.init_seed`.
    pub fn new(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let layers = spec
            .widths()
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Dense::zeros(w[0], w[1]);
                for x in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                    *x = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// All parameters, weights before biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    /// Overwrites the parameters from the layout of [`Mlp::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.spec.parameter_count() {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.spec.parameter_count()
            )));
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for x in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *x = it.next().expect("length checked above");
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.spec.input_size {
            return Err(NnError::ShapeMismatch(format!(
                "input of length {}, network expects {}",
                x.len(),
                self.spec.input_size
            )));
        }
        Ok(())
    }

    /// Q-values for every action.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&current, &mut next);
            if i < last {
                next.iter_mut()
                    .for_each(|v| *v = self.spec.activation.apply(*v));
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    /// Activations of every layer, input first.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward_into(acts.last().expect("non-empty"), &mut out);
            if i < last {
                out.iter_mut()
                    .for_each(|v| *v = self.spec.activation.apply(*v));
            }
            acts.push(out);
        }
        acts
    }

    fn check_batch(&self, inputs: &[Vec<f64>], targets: &[(Action, f64)]) -> Result<(), NnError> {
        if inputs.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if inputs.len() != targets.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        Ok(())
    }

    /// Mean squared error between the selected heads and their targets.
    pub fn batch_loss(&self, inputs: &[Vec<f64>], targets: &[(Action, f64)]) -> Result<f64, NnError> {
        self.check_batch(inputs, targets)?;
        let mut total = 0.0;
        for (x, &(a, y)) in inputs.iter().zip(targets) {
            let q = self.forward(x)?;
            total += (q[a.index()] - y).powi(2);
        }
        Ok(total / inputs.len() as f64)
    }

    /// Loss and its gradient with respect to every parameter. Only the selected
    /// action's head contributes error for each sample.
    pub fn loss_and_gradients(
        &self,
        inputs: &[Vec<f64>],
        targets: &[(Action, f64)],
    ) -> Result<(f64, Gradients), NnError> {
        self.check_batch(inputs, targets)?;
        let n = inputs.len() as f64;
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for (x, &(action, y)) in inputs.iter().zip(targets) {
            let acts = self.forward_trace(x);
            let out = acts.last().expect("non-empty");
            let err = out[action.index()] - y;
            loss += err * err;

            let mut delta = vec![0.0; out.len()];
            delta[action.index()] = 2.0 * err / n;
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let g = &mut grads.layers[li];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &xi) in row.iter_mut().zip(input) {
                        *gw += d * xi;
                    }
                }
                if li == 0 {
                    break;
                }
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
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= self.spec.activation.derivative_from_output(a);
                }
                delta = prev;
            }
        }
        Ok((loss / n, grads))
    }

    /// One optimizer step on the batch. Returns the loss before the update.
    pub fn train_batch(
        &mut self,
        optimizer: &mut Adam,
        inputs: &[Vec<f64>],
        targets: &[(Action, f64)],
    ) -> Result<f64, NnError> {
        if let Some(&(_, y)) = targets.iter().find(|(_, y)| !y.is_finite()) {
            return Err(NnError::NonFiniteLoss(y));
        }
        let (loss, grads) = self.loss_and_gradients(inputs, targets)?;
        if !loss.is_finite() {
            return Err(NnError::NonFiniteLoss(loss));
        }
        optimizer.step(self, &grads)?;
        Ok(loss)
    }

    fn check_same_shape(&self, other: &Mlp) -> Result<(), NnError> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs);
        if same {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch("networks have different layer shapes".into()))
        }
    }

    /// `self ← (1 − mix)·self + mix·main`, elementwise.
    pub fn soft_update(&mut self, main: &Mlp, mix: f64) -> Result<(), NnError> {
        self.check_same_shape(main)?;
        for (t, m) in self.layers.iter_mut().zip(&main.layers) {
            for (tv, mv) in t
                .weights
                .iter_mut()
                .zip(&m.weights)
                .chain(t.biases.iter_mut().zip(&m.biases))
            {
                *tv = (1.0 - mix) * *tv + mix * mv;
            }
        }
        Ok(())
    }

    /// Euclidean distance between the parameter vectors of two networks.
    pub fn parameter_distance(&self, other: &Mlp) -> Result<f64, NnError> {
        self.check_same_shape(other)?;
        Ok(self
            .flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(config: AdamConfig, mlp: &Mlp) -> Self {
        Self {
            config,
            t: 0,
            m: Gradients::zeros_like(mlp),
            v: Gradients::zeros_like(mlp),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<(), NnError> {
        if grads.layers.len() != mlp.layers.len() {
            return Err(NnError::ShapeMismatch("gradient/network layer count".into()));
        }
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.t as i32);
        let bias2 = 1.0 - beta2.powi(self.t as i32);
        for (((layer, g), m), v) in mlp
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
            let gs = g.weights.iter().chain(&g.biases);
            let ms = m.weights.iter_mut().chain(m.biases.iter_mut());
            let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
            for (((p, &gi), mi), vi) in params.zip(gs).zip(ms).zip(vs) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// On-disk network snapshot (JSON). Floats round-trip bit-exactly.
///
/// ```text
/// { "format": "qse-mlp", "version": 1, "spec": {...}, "step": 2000,
///   "layers": [ { "inputs": 70, "outputs": 128, "weights": [...], "biases": [...] }, ... ] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: MlpSpec,
    /// Training step at which the snapshot was taken.
    pub step: u64,
    pub layers: Vec<Dense>,
}

impl Checkpoint {
    pub fn from_mlp(mlp: &Mlp, step: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: mlp.spec.clone(),
            step,
            layers: mlp.layers.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(self)
            .map_err(|e| NnError::SchemaMismatch(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NnError::SchemaMismatch(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(NnError::SchemaMismatch(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the network, checking the stored layers against the stored spec.
    pub fn into_mlp(self) -> Result<Mlp, NnError> {
        let widths = self.spec.widths();
        let consistent = self.layers.len() + 1 == widths.len()
            && self.layers.iter().zip(widths.windows(2)).all(|(l, w)| {
                l.inputs == w[0]
                    && l.outputs == w[1]
                    && l.weights.len() == w[0] * w[1]
                    && l.biases.len() == w[1]
            });
        if !consistent {
            return Err(NnError::SchemaMismatch(
                "layer shapes disagree with the recorded spec".into(),
            ));
        }
        self.spec
            .validate()
            .map_err(|e| NnError::SchemaMismatch(e.to_string()))?;
        Ok(Mlp {
            spec: self.spec,
            layers: self.layers,
        })
    }

    /// Like [`Checkpoint::into_mlp`] but also requires the architecture to
    /// match `expected` (the seed may differ).
    pub fn into_mlp_for(self, expected: &MlpSpec) -> Result<Mlp, NnError> {
        let s = &self.spec;
        if s.input_size != expected.input_size
            || s.hidden != expected.hidden
            || s.output_size != expected.output_size
            || s.activation != expected.activation
        {
            return Err(NnError::SchemaMismatch(format!(
                "checkpoint network {:?} does not match configured {:?}",
                s.widths(),
                expected.widths()
            )));
        }
        self.into_mlp()
    }
}

pub fn save_params(mlp: &Mlp, step: u64, path: &Path) -> Result<(), NnError> {
    Checkpoint::from_mlp(mlp, step).save(path)
}

/// Loads a checkpoint whose architecture must equal `expected`; returns the
/// network and its training step.
pub fn load_params(path: &Path, expected: &MlpSpec) -> Result<(Mlp, u64), NnError> {
    let ckpt = Checkpoint::load(path)?;
    let step = ckpt.step;
    Ok((ckpt.into_mlp_for(expected)?, step))
}
