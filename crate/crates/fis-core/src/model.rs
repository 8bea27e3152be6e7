//! Feed-forward classifier with per-example gradients.
//!
//! The model is a fully connected network with ReLU hidden activations
//! and a softmax output, trained with cross-entropy. Parameters live in
//! one flat vector so gradients, influence inner products, and parameter
//! counts stay trivial to reason about. Layer `l` maps `in` units to
//! `out` units and occupies `(in + 1) * out` consecutive entries:
//! weights in row-major `[input][output]` order, then biases.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Example};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer sizes {0:?} need at least an input and an output layer of width >= 1")]
    BadLayerSizes(Vec<usize>),
    #[error("input has {got} features, model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("example {index} has no label")]
    MissingLabel { index: usize },
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("gradient scope asks for {requested} layers but the model has {layers}")]
    BadScope { requested: usize, layers: usize },
    #[error("{0}")]
    BadConfig(String),
    #[error("cannot train or evaluate on an empty dataset")]
    EmptyData,
    #[error("checkpoint: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which slice of the parameter vector gradient-based scoring sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    /// Every parameter.
    Full,
    /// Only the trailing `n` layers; earlier entries are zero-filled.
    LastLayers(usize),
}

impl Default for GradScope {
    fn default() -> Self {
        GradScope::Full
    }
}

/// Flat gradient over the full parameter vector. Entries outside the
/// requested scope are zero-filled, never dropped, so vectors of any
/// scope share one length and dot products stay well defined.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<S> {
    pub values: Vec<S>,
    pub scope: GradScope,
}

impl<S: Scalar> GradientVector<S> {
    pub fn dot(&self, other: &GradientVector<S>) -> S {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Weight applied to newly sampled examples when retraining.
    #[serde(default = "default_new_data_weight")]
    pub new_data_weight: f64,
    #[serde(default)]
    pub grad_scope: GradScope,
}

fn default_learning_rate() -> f64 {
    0.05
}

fn default_epochs() -> usize {
    50
}

fn default_batch_size() -> usize {
    32
}

fn default_new_data_weight() -> f64 {
    2.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            new_data_weight: default_new_data_weight(),
            grad_scope: GradScope::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::BadConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.new_data_weight >= 1.0) {
            return Err(ModelError::BadConfig(format!(
                "new_data_weight must be >= 1, got {}",
                self.new_data_weight
            )));
        }
        Ok(())
    }
}

/// The classifier: flat parameters plus the layer layout and a count of
/// optimizer steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    pub params: Vec<S>,
    pub layer_sizes: Vec<usize>,
    pub step: u64,
}

/// Number of parameters a given layer layout needs.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| (w[0] + 1) * w[1])
        .sum()
}

fn validate_layer_sizes(layer_sizes: &[usize]) -> Result<(), ModelError> {
    if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
        return Err(ModelError::BadLayerSizes(layer_sizes.to_vec()));
    }
    Ok(())
}

/// Initializes parameters uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// per layer, deterministically from the seed.
pub fn init_model<S: Scalar>(layer_sizes: &[usize], init_seed: u64) -> Result<ModelState<S>, ModelError> {
    validate_layer_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(fan_in + 1) * fan_out {
            params.push(S::from_f64_lossy(rng.gen_range(-bound..bound)));
        }
    }
    Ok(ModelState {
        params,
        layer_sizes: layer_sizes.to_vec(),
        step: 0,
    })
}

impl<S: Scalar> ModelState<S> {
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Offset of the first parameter inside `scope`.
    fn scope_start(&self, scope: GradScope) -> Result<usize, ModelError> {
        match scope {
            GradScope::Full => Ok(0),
            GradScope::LastLayers(n) => {
                let layers = self.num_layers();
                if n == 0 || n > layers {
                    return Err(ModelError::BadScope {
                        requested: n,
                        layers,
                    });
                }
                Ok(param_count(&self.layer_sizes[..self.layer_sizes.len() - n]))
            }
        }
    }

    fn check_input(&self, x: &[S]) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                got: x.len(),
                expected: self.input_dim(),
            });
        }
        Ok(())
    }

    /// Forward pass, keeping pre-activations and layer inputs for
    /// backpropagation. Returns (per-layer inputs, pre-activations,
    /// output probabilities).
    fn forward_trace(&self, x: &[S]) -> (Vec<Vec<S>>, Vec<Vec<S>>, Vec<S>) {
        let layers = self.num_layers();
        let mut inputs: Vec<Vec<S>> = Vec::with_capacity(layers);
        let mut pre: Vec<Vec<S>> = Vec::with_capacity(layers);
        let mut current = x.to_vec();
        let mut offset = 0;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let biases = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let mut activation: Vec<S> = biases.to_vec();
            for (i, &z) in current.iter().enumerate() {
                let row = &weights[i * fan_out..(i + 1) * fan_out];
                for (a, &wij) in activation.iter_mut().zip(row) {
                    *a += z * wij;
                }
            }
            inputs.push(current);
            pre.push(activation.clone());
            current = if l + 1 == layers {
                softmax(&activation)
            } else {
                activation.iter().map(|&a| a.max(S::zero())).collect()
            };
            offset += (fan_in + 1) * fan_out;
        }
        (inputs, pre, current)
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[S]) -> Result<Vec<S>, ModelError> {
        self.check_input(x)?;
        let (_, _, probs) = self.forward_trace(x);
        Ok(probs)
    }

    /// Backpropagates an arbitrary gradient with respect to the output
    /// logits into a full-length parameter gradient.
    fn backprop_logits(&self, inputs: &[Vec<S>], pre: &[Vec<S>], dlogits: Vec<S>) -> Vec<S> {
        let layers = self.num_layers();
        let mut grad = vec![S::zero(); self.params.len()];
        let mut delta = dlogits;
        let mut offsets = Vec::with_capacity(layers);
        {
            let mut offset = 0;
            for w in self.layer_sizes.windows(2) {
                offsets.push(offset);
                offset += (w[0] + 1) * w[1];
            }
        }
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let offset = offsets[l];
            let layer_input = &inputs[l];
            for (i, &z) in layer_input.iter().enumerate() {
                let row = &mut grad[offset + i * fan_out..offset + (i + 1) * fan_out];
                for (g, &d) in row.iter_mut().zip(&delta) {
                    *g = z * d;
                }
            }
            let bias_row = &mut grad[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            for (g, &d) in bias_row.iter_mut().zip(&delta) {
                *g = d;
            }
            if l > 0 {
                let weights = &self.params[offset..offset + fan_in * fan_out];
                let mut prev = vec![S::zero(); fan_in];
                for (i, p) in prev.iter_mut().enumerate() {
                    let row = &weights[i * fan_out..(i + 1) * fan_out];
                    let mut acc = S::zero();
                    for (&wij, &d) in row.iter().zip(&delta) {
                        acc += wij * d;
                    }
                    // ReLU passes gradient only where the unit fired.
                    *p = if pre[l - 1][i] > S::zero() { acc } else { S::zero() };
                }
                delta = prev;
            }
        }
        grad
    }

    fn apply_scope(&self, mut values: Vec<S>, scope: GradScope) -> Result<GradientVector<S>, ModelError> {
        let start = self.scope_start(scope)?;
        for v in values.iter_mut().take(start) {
            *v = S::zero();
        }
        Ok(GradientVector { values, scope })
    }

    /// Gradient of the cross-entropy loss of one labeled example.
    pub fn grad_example_loss(&self, ex: &Example<S>, scope: GradScope) -> Result<GradientVector<S>, ModelError> {
        self.check_input(&ex.features)?;
        let label = ex.label.ok_or(ModelError::MissingLabel { index: 0 })?;
        if label >= self.num_classes() {
            return Err(ModelError::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            });
        }
        let (inputs, pre, probs) = self.forward_trace(&ex.features);
        let mut dlogits = probs;
        dlogits[label] -= S::one();
        let values = self.backprop_logits(&inputs, &pre, dlogits);
        self.apply_scope(values, scope)
    }

    /// Gradient of the predicted probability of `class` for one input.
    pub fn grad_class_probability(
        &self,
        x: &[S],
        class: usize,
        scope: GradScope,
    ) -> Result<GradientVector<S>, ModelError> {
        self.check_input(x)?;
        if class >= self.num_classes() {
            return Err(ModelError::LabelOutOfRange {
                label: class,
                num_classes: self.num_classes(),
            });
        }
        let (inputs, pre, probs) = self.forward_trace(x);
        let pc = probs[class];
        let dlogits: Vec<S> = probs
            .iter()
            .enumerate()
            .map(|(j, &pj)| {
                let indicator = if j == class { S::one() } else { S::zero() };
                pc * (indicator - pj)
            })
            .collect();
        let values = self.backprop_logits(&inputs, &pre, dlogits);
        self.apply_scope(values, scope)
    }
}

fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .cloned()
        .fold(S::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<S> = logits.iter().map(|&a| (a - max).exp()).collect();
    let total: S = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy loss of one labeled example.
pub fn example_loss<S: Scalar>(m: &ModelState<S>, ex: &Example<S>) -> Result<S, ModelError> {
    let label = ex.label.ok_or(ModelError::MissingLabel { index: 0 })?;
    if label >= m.num_classes() {
        return Err(ModelError::LabelOutOfRange {
            label,
            num_classes: m.num_classes(),
        });
    }
    let probs = m.forward(&ex.features)?;
    Ok(-(probs[label].max(S::min_positive_value())).ln())
}

// An integral weight accumulates as that many literal additions, so a
// weight-w example and w duplicated copies of it update parameters bit
// for bit identically. The fractional remainder is one scaled addition.
fn accumulate_weighted<S: Scalar>(acc: &mut [S], grad: &[S], weight: S) {
    let cap = S::from_f64_lossy(64.0);
    let mut remaining = weight;
    if weight <= cap {
        while remaining >= S::one() {
            for (a, &g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
            remaining -= S::one();
        }
        if remaining > S::zero() {
            for (a, &g) in acc.iter_mut().zip(grad) {
                *a += remaining * g;
            }
        }
    } else {
        for (a, &g) in acc.iter_mut().zip(grad) {
            *a += remaining * g;
        }
    }
}

/// Mini-batch SGD over a weighted example list. Batch order is seeded;
/// the single-batch case keeps list order. Returns the trained model and
/// the weighted mean training loss per epoch.
pub fn sgd_train<S: Scalar>(
    m: &ModelState<S>,
    data: &[(Example<S>, S)],
    cfg: &TrainConfig,
) -> Result<(ModelState<S>, Vec<f64>), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::BadConfig("batch_size must be >= 1".into()));
    }
    for (ex, w) in data {
        if ex.features.len() != m.input_dim() {
            return Err(ModelError::DimensionMismatch {
                got: ex.features.len(),
                expected: m.input_dim(),
            });
        }
        let label = ex.label.ok_or(ModelError::MissingLabel { index: 0 })?;
        if label >= m.num_classes() {
            return Err(ModelError::LabelOutOfRange {
                label,
                num_classes: m.num_classes(),
            });
        }
        if !(*w > S::zero()) {
            return Err(ModelError::BadConfig(format!("example weight must be > 0, got {w}")));
        }
    }

    let eta = S::from_f64_lossy(cfg.learning_rate);
    let mut model = m.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let multiple_batches = cfg.batch_size < n;
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        if multiple_batches {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0f64;
        let mut epoch_weight = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = vec![S::zero(); model.params.len()];
            let mut batch_weight = S::zero();
            for &idx in chunk {
                let (ex, w) = &data[idx];
                let label = ex.label.unwrap();
                let (inputs, pre, probs) = model.forward_trace(&ex.features);
                let loss = -(probs[label].max(S::min_positive_value())).ln();
                epoch_loss += w.to_f64_lossy() * loss.to_f64_lossy();
                epoch_weight += w.to_f64_lossy();
                let mut dlogits = probs;
                dlogits[label] -= S::one();
                let grad = model.backprop_logits(&inputs, &pre, dlogits);
                accumulate_weighted(&mut acc, &grad, *w);
                batch_weight += *w;
            }
            for (p, g) in model.params.iter_mut().zip(&acc) {
                *p = *p - eta * (*g / batch_weight);
            }
            model.step += 1;
        }
        history.push(epoch_loss / epoch_weight);
    }
    Ok((model, history))
}

/// Accuracy and mean loss of a model on a labeled dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Predicted class per example; argmax ties resolve to the lowest index.
pub fn predict<S: Scalar>(m: &ModelState<S>, ds: &Dataset<S>) -> Result<Vec<usize>, ModelError> {
    let mut labels = Vec::with_capacity(ds.len());
    for ex in &ds.examples {
        let probs = m.forward(&ex.features)?;
        let mut best = 0;
        for (j, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = j;
            }
        }
        labels.push(best);
    }
    Ok(labels)
}

/// Evaluates accuracy and mean cross-entropy on a labeled dataset.
pub fn evaluate<S: Scalar>(m: &ModelState<S>, ds: &Dataset<S>) -> Result<EvalMetrics, ModelError> {
    if ds.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let predictions = predict(m, ds)?;
    let mut correct = 0usize;
    let mut loss_total = 0.0f64;
    for (index, ex) in ds.examples.iter().enumerate() {
        let label = ex.label.ok_or(ModelError::MissingLabel { index })?;
        if label >= m.num_classes() {
            return Err(ModelError::LabelOutOfRange {
                label,
                num_classes: m.num_classes(),
            });
        }
        if predictions[index] == label {
            correct += 1;
        }
        loss_total += example_loss(m, ex)?.to_f64_lossy();
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / ds.len() as f64,
        mean_loss: loss_total / ds.len() as f64,
    })
}

/// Writes a checkpoint: layer sizes, step counter, then one parameter
/// per line with 17 significant digits, which round-trips `f64` exactly.
pub fn write_checkpoint<S: Scalar>(m: &ModelState<S>, writer: &mut impl Write) -> Result<(), ModelError> {
    let sizes: Vec<String> = m.layer_sizes.iter().map(|s| s.to_string()).collect();
    writeln!(writer, "layers {}", sizes.join(" "))?;
    writeln!(writer, "step {}", m.step)?;
    for p in &m.params {
        writeln!(writer, "{:.16e}", p.to_f64_lossy())?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<S: Scalar>(reader: &mut impl BufRead) -> Result<ModelState<S>, ModelError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| ModelError::CheckpointFormat("missing layers header".into()))??;
    let layer_sizes: Vec<usize> = header
        .strip_prefix("layers ")
        .ok_or_else(|| ModelError::CheckpointFormat(format!("expected 'layers ...', got {header:?}")))?
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| ModelError::CheckpointFormat(format!("bad layer size {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    validate_layer_sizes(&layer_sizes)?;
    let step_line = lines
        .next()
        .ok_or_else(|| ModelError::CheckpointFormat("missing step header".into()))??;
    let step: u64 = step_line
        .strip_prefix("step ")
        .ok_or_else(|| ModelError::CheckpointFormat(format!("expected 'step ...', got {step_line:?}")))?
        .trim()
        .parse()
        .map_err(|_| ModelError::CheckpointFormat(format!("bad step in {step_line:?}")))?;
    let expected = param_count(&layer_sizes);
    let mut params = Vec::with_capacity(expected);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: f64 = line
            .trim()
            .parse()
            .map_err(|_| ModelError::CheckpointFormat(format!("bad parameter {line:?}")))?;
        params.push(S::from_f64_lossy(value));
    }
    if params.len() != expected {
        return Err(ModelError::CheckpointFormat(format!(
            "expected {expected} parameters, found {}",
            params.len()
        )));
    }
    Ok(ModelState {
        params,
        layer_sizes,
        step,
    })
}
