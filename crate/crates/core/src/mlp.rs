//! Small fully-connected networks with softmax heads, trained by plain
//! gradient descent on cross-entropy with hand-written backpropagation.
//!
//! Batches are stored column-wise: an input batch is a `dim x batch` matrix.
//! A binary classifier (the per-entry building block of the detectors) has a
//! two-logit head where logit 0 scores `x_n = +1` and logit 1 scores
//! `x_n = -1`; its likelihood ratio is `exp(logit_0 - logit_1)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::BinaryTrainingSet;
use crate::seed;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Relu,
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Identity,
        }
    }
}

/// ReLU hidden layers of the given widths followed by a two-logit head.
pub fn adnn_architecture(hidden: &[usize]) -> Vec<LayerSpec> {
    hidden
        .iter()
        .map(|&w| LayerSpec::relu(w))
        .chain(std::iter::once(LayerSpec::identity(2)))
        .collect()
}

/// `Q -> 32 (ReLU) -> 32 (ReLU) -> 2`.
pub fn default_adnn_architecture() -> Vec<LayerSpec> {
    adnn_architecture(&[32, 32])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            width: self.weights.nrows(),
            activation: self.activation,
        }
    }

    fn pre_activation(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
pub struct ForwardCache {
    /// Input to each layer; the last element is the network output.
    activations: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("non-empty network")
    }
}

/// Parameter gradients, one `(d weights, d bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl Gradients {
    pub fn zeros_like(m: &MlpModel) -> Self {
        Self {
            layers: m
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            *w *= s;
            *b *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    /// All entries, layer by layer, weights (column-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }
}

impl MlpModel {
    pub fn from_layers(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 || layers.is_empty() {
            return Err(Error::invalid("network needs a positive input dimension and at least one layer"));
        }
        let mut fan_in = input_dim;
        for (j, l) in layers.iter().enumerate() {
            if l.weights.ncols() != fan_in {
                return Err(Error::Dimension {
                    what: "layer fan-in",
                    expected: fan_in,
                    actual: l.weights.ncols(),
                });
            }
            if l.bias.len() != l.weights.nrows() || l.weights.nrows() == 0 {
                return Err(Error::invalid(format!("layer {j} has inconsistent or empty bias")));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
            fan_in = l.weights.nrows();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn zeros(input_dim: usize, specs: &[LayerSpec]) -> Result<Self> {
        let mut fan_in = input_dim;
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            layers.push(Layer {
                weights: DMatrix::zeros(s.width, fan_in),
                bias: DVector::zeros(s.width),
                activation: s.activation,
            });
            fan_in = s.width;
        }
        Self::from_layers(input_dim, layers)
    }

    /// Weights uniform in `[-s, s]` with `s = scale / sqrt(fan_in)`, biases zero.
    pub fn init_uniform(input_dim: usize, specs: &[LayerSpec], scale: f64, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(input_dim, specs)?;
        let mut rng = seed::rng(seed);
        for l in &mut m.layers {
            let s = scale / (l.weights.ncols() as f64).sqrt();
            let dist = Uniform::new_inclusive(-s, s).map_err(|e| Error::invalid(e.to_string()))?;
            for w in l.weights.iter_mut() {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_binary_head(&self) -> bool {
        self.layers
            .last()
            .is_some_and(|l| l.weights.nrows() == 2 && l.activation == Activation::Identity)
    }

    fn check_input(&self, input: &DVector<f64>) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim,
                actual: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Output logits for a batch of column inputs.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        for l in &self.layers {
            let mut z = l.pre_activation(&a);
            if l.activation != Activation::Identity {
                z.apply(|v| *v = l.activation.apply(*v));
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for l in &self.layers {
            let z = l.pre_activation(activations.last().unwrap());
            let a = z.map(|v| l.activation.apply(v));
            pre.push(z);
            activations.push(a);
        }
        ForwardCache { activations, pre }
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the outputs of the
    /// cached batch). Returns gradients summed over the batch and the
    /// gradient w.r.t. the batch inputs.
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> (Gradients, DMatrix<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for (j, l) in self.layers.iter().enumerate().rev() {
            if l.activation != Activation::Identity {
                delta.zip_apply(&cache.pre[j], |d, z| *d *= l.activation.derivative(z));
            }
            let dw = &delta * cache.activations[j].transpose();
            let db = delta.column_sum();
            let d_in = l.weights.transpose() * &delta;
            grads.push((dw, db));
            delta = d_in;
        }
        grads.reverse();
        (Gradients { layers: grads }, delta)
    }

    /// `theta -= lr * grads`.
    pub fn step(&mut self, grads: &Gradients, lr: f64) {
        for (l, (dw, db)) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.zip_apply(dw, |w, d| *w -= lr * d);
            l.bias.axpy(-lr, db, 1.0);
        }
    }

    pub fn logits(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(input)?;
        let out = self.forward(&DMatrix::from_column_slice(input.len(), 1, input.as_slice()));
        Ok(out.column(0).into_owned())
    }

    /// All parameters, layer by layer, weights (column-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    /// Overwrites parameters from a vector in `flatten` order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: self.parameter_count(),
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().unwrap();
            }
        }
        Ok(())
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Column-wise softmax probabilities.
pub fn softmax_columns(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut col in out.column_iter_mut() {
        let values: Vec<f64> = col.iter().copied().collect();
        let lse = log_sum_exp(&values);
        col.apply(|v| *v = (*v - lse).exp());
    }
    out
}

/// Mean softmax cross-entropy of `logits` (`classes x batch`) against
/// `targets`, and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &DMatrix<f64>, targets: &[usize]) -> (f64, DMatrix<f64>) {
    let batch = targets.len();
    assert_eq!(logits.ncols(), batch, "one target per column");
    let mut grad = softmax_columns(logits);
    let mut loss = 0.0;
    for (k, &t) in targets.iter().enumerate() {
        let p = grad[(t, k)].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss -= p.ln();
        grad[(t, k)] -= 1.0;
    }
    let inv = 1.0 / batch as f64;
    grad *= inv;
    (loss * inv, grad)
}

fn argmax_first(col: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in col.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Class predicted for each column; ties go to the lowest class index.
pub fn predict_classes(logits: &DMatrix<f64>) -> Vec<usize> {
    logits.column_iter().map(|c| argmax_first(c.iter().copied())).collect()
}

/// `(p(+1 | input), p(-1 | input))` of a binary-head network.
pub fn forward_probs(m: &MlpModel, input: &DVector<f64>) -> Result<(f64, f64)> {
    let z = m.logits(input)?;
    if z.len() != 2 {
        return Err(Error::Dimension {
            what: "binary head",
            expected: 2,
            actual: z.len(),
        });
    }
    let lse = log_sum_exp(z.as_slice());
    Ok(((z[0] - lse).exp(), (z[1] - lse).exp()))
}

/// `ln(p(+1 | input) / p(-1 | input)) = logit_0 - logit_1`.
pub fn log_likelihood_ratio(m: &MlpModel, input: &DVector<f64>) -> Result<f64> {
    let z = m.logits(input)?;
    if z.len() != 2 {
        return Err(Error::Dimension {
            what: "binary head",
            expected: 2,
            actual: z.len(),
        });
    }
    let llr = z[0] - z[1];
    if !llr.is_finite() {
        return Err(Error::NonFinite("log-likelihood ratio"));
    }
    Ok(llr)
}

pub fn likelihood_ratio(m: &MlpModel, input: &DVector<f64>) -> Result<f64> {
    Ok(log_likelihood_ratio(m, input)?.exp())
}

/// Log-likelihood ratios for a batch of column inputs (no validation).
pub fn log_likelihood_ratios(m: &MlpModel, inputs: &DMatrix<f64>) -> Vec<f64> {
    let z = m.forward(inputs);
    z.column_iter().map(|c| c[0] - c[1]).collect()
}

/// Gradient of the mean cross-entropy over a batch, with the loss itself.
pub fn gradients(m: &MlpModel, inputs: &DMatrix<f64>, targets: &[usize]) -> Result<(f64, Gradients)> {
    if targets.is_empty() || inputs.ncols() != targets.len() {
        return Err(Error::invalid("gradient batch must be non-empty with one target per column"));
    }
    if inputs.nrows() != m.input_dim() {
        return Err(Error::Dimension {
            what: "network input",
            expected: m.input_dim(),
            actual: inputs.nrows(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= m.output_dim()) {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: t,
            len: m.output_dim(),
        });
    }
    let cache = m.forward_cached(inputs);
    let (loss, d_out) = softmax_cross_entropy(cache.output(), targets);
    let (grads, _) = m.backward(&cache, &d_out);
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((loss, grads))
}

/// Mean cross-entropy of `m` over a labeled batch.
pub fn cross_entropy(m: &MlpModel, inputs: &DMatrix<f64>, targets: &[usize]) -> f64 {
    softmax_cross_entropy(&m.forward(inputs), targets).0
}

/// Fraction of columns whose predicted class matches the target.
pub fn accuracy(m: &MlpModel, inputs: &DMatrix<f64>, targets: &[usize]) -> f64 {
    let pred = predict_classes(&m.forward(inputs));
    let hits = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / targets.len().max(1) as f64
}

/// `(Frobenius norm B_j, activation Lipschitz constant L_j)` per layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub frobenius: f64,
    pub lipschitz: f64,
}

pub fn layer_norms(m: &MlpModel) -> Vec<LayerNorm> {
    m.layers
        .iter()
        .map(|l| LayerNorm {
            frobenius: l.weights.norm(),
            lipschitz: l.activation.lipschitz(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batches at least as large as the data set are full-batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Multiplier on the `1/sqrt(fan_in)` init range.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 4096,
            learning_rate: 0.05,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            bad.push(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpModel,
    pub report: TrainReport,
}

/// Gradient descent on mean cross-entropy from the given initial model.
/// Returns the iterate with the lowest training loss seen, so the result
/// never scores worse than the initialization.
pub fn train_classifier(
    init: MlpModel,
    inputs: &DMatrix<f64>,
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let n = targets.len();
    let mut model = init;
    let initial_loss = cross_entropy(&model, inputs, targets);
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: initial_loss,
        });
    }
    let mut best_loss = initial_loss;
    let mut best = model.clone();
    let full_batch = cfg.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::stream::SHARD, 0));

    for epoch in 0..cfg.epochs {
        if full_batch {
            let (loss, grads) = gradients(&model, inputs, targets).map_err(|_| Error::Diverged {
                epoch,
                loss: f64::NAN,
            })?;
            if loss < best_loss {
                best_loss = loss;
                best = model.clone();
            }
            model.step(&grads, cfg.learning_rate);
        } else {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let cols: Vec<_> = chunk.iter().map(|&i| inputs.column(i)).collect();
                let batch = DMatrix::from_columns(&cols);
                let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let (_, grads) = gradients(&model, &batch, &t).map_err(|_| Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                })?;
                model.step(&grads, cfg.learning_rate);
            }
            let loss = cross_entropy(&model, inputs, targets);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            if loss < best_loss {
                best_loss = loss;
                best = model.clone();
            }
        }
    }
    let last = cross_entropy(&model, inputs, targets);
    if !last.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            loss: last,
        });
    }
    if last < best_loss {
        best_loss = last;
        best = model;
    }
    let train_accuracy = accuracy(&best, inputs, targets);
    Ok(Trained {
        model: best,
        report: TrainReport {
            initial_loss,
            final_loss: best_loss,
            train_accuracy,
            epochs: cfg.epochs,
        },
    })
}

/// Trains a binary classifier with the given layer specs on a shifted
/// training set. The last spec must be a two-wide identity layer.
pub fn train(specs: &[LayerSpec], data: &BinaryTrainingSet, cfg: &TrainConfig) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    if specs.last() != Some(&LayerSpec::identity(2)) {
        return Err(Error::invalid("a binary classifier must end in a two-wide identity layer"));
    }
    let init = MlpModel::init_uniform(data.inputs.nrows(), specs, cfg.init_scale, cfg.seed)?;
    train_classifier(init, &data.inputs, &data.classes(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Label;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Binary model whose head returns the given logits for every input.
    fn constant_logits(input_dim: usize, plus: f64, minus: f64) -> MlpModel {
        let mut m = MlpModel::zeros(input_dim, &[LayerSpec::identity(2)]).unwrap();
        m.layers_mut()[0].bias = DVector::from_vec(vec![plus, minus]);
        m
    }

    fn random_model(seed: u64, input_dim: usize, specs: &[LayerSpec]) -> MlpModel {
        let mut m = MlpModel::init_uniform(input_dim, specs, 1.0, seed).unwrap();
        let mut rng = seed::rng(seed ^ 0xABCD);
        for l in m.layers_mut() {
            for b in l.bias.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    fn random_batch(seed: u64, dim: usize, batch: usize, classes: usize) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let x = DMatrix::from_fn(dim, batch, |_, _| rng.random_range(-2.0..2.0));
        let t = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        (x, t)
    }

    #[test]
    fn zero_model_is_indifferent() {
        let m = MlpModel::zeros(3, &default_adnn_architecture()).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(forward_probs(&m, &y).unwrap(), (0.5, 0.5));
        assert_eq!(likelihood_ratio(&m, &y).unwrap(), 1.0);
    }

    #[test]
    fn softmax_head_arithmetic() {
        let m = constant_logits(2, 3f64.ln(), 0.0);
        let y = DVector::zeros(2);
        let (pp, pm) = forward_probs(&m, &y).unwrap();
        assert_relative_eq!(pp, 0.75, epsilon = 1e-15);
        assert_relative_eq!(pm, 0.25, epsilon = 1e-15);
        assert_relative_eq!(likelihood_ratio(&m, &y).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let m = constant_logits(1, 800.0, -800.0);
        let (pp, pm) = forward_probs(&m, &DVector::zeros(1)).unwrap();
        assert_eq!(pp + pm, 1.0);
        assert_eq!(log_likelihood_ratio(&m, &DVector::zeros(1)).unwrap(), 1600.0);
    }

    #[test]
    fn input_checks() {
        let m = MlpModel::zeros(3, &default_adnn_architecture()).unwrap();
        assert!(forward_probs(&m, &DVector::zeros(2)).is_err());
        assert!(likelihood_ratio(&m, &DVector::from_vec(vec![0.0, f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn layer_norm_values() {
        let mut m = MlpModel::zeros(1, &[LayerSpec::identity(1)]).unwrap();
        m.layers_mut()[0].weights[(0, 0)] = 1.0;
        assert_eq!(layer_norms(&m)[0].frobenius, 1.0);
        let mut m = MlpModel::zeros(2, &[LayerSpec::relu(2), LayerSpec::identity(2)]).unwrap();
        m.layers_mut()[0].weights.fill(1.0);
        let norms = layer_norms(&m);
        assert_eq!(norms[0].frobenius, 2.0);
        assert_eq!(norms[0].lipschitz, 1.0);
        assert_eq!(norms[1].lipschitz, 1.0);
    }

    #[test]
    fn symmetric_zero_model_has_zero_output_bias_gradient() {
        let m = MlpModel::zeros(3, &default_adnn_architecture()).unwrap();
        let (x, _) = random_batch(4, 3, 10, 2);
        let t: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let (_, g) = gradients(&m, &x, &t).unwrap();
        assert!(g.layers.last().unwrap().1.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let m = random_model(9, 4, &default_adnn_architecture());
        let (x, t) = random_batch(10, 4, 7, 2);
        let x2 = DMatrix::from_fn(4, 14, |r, c| x[(r, c % 7)]);
        let t2: Vec<usize> = (0..14).map(|c| t[c % 7]).collect();
        let (_, g1) = gradients(&m, &x, &t).unwrap();
        let (_, g2) = gradients(&m, &x2, &t2).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert_relative_eq!(*a, b, epsilon = 1e-14, max_relative = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let specs = [LayerSpec::relu(6), LayerSpec::relu(5), LayerSpec::identity(3)];
        for trial in 0..10u64 {
            let m = random_model(100 + trial, 4, &specs);
            let (x, t) = random_batch(200 + trial, 4, 9, 3);
            let (_, g) = gradients(&m, &x, &t).unwrap();
            let err = max_fd_relative_error(&m, &x, &t, &g.flatten());
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    /// Central finite differences, step 1e-5, on every parameter.
    fn max_fd_relative_error(m: &MlpModel, x: &DMatrix<f64>, t: &[usize], analytic: &[f64]) -> f64 {
        let theta = m.flatten();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut probe = m.clone();
            let mut p = theta.clone();
            p[i] = theta[i] + h;
            probe.set_flat(&p).unwrap();
            let up = cross_entropy(&probe, x, t);
            p[i] = theta[i] - h;
            probe.set_flat(&p).unwrap();
            let down = cross_entropy(&probe, x, t);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
        worst
    }

    fn separable_set(seed: u64) -> BinaryTrainingSet {
        let mut rng = seed::rng(seed);
        let mut inputs = DMatrix::zeros(2, 40);
        let mut labels = Vec::new();
        for k in 0..40 {
            let label = if k % 2 == 0 { Label::Plus } else { Label::Minus };
            let x0 = rng.random_range(0.1..2.0) * label.sign() as f64;
            inputs[(0, k)] = x0;
            inputs[(1, k)] = rng.random_range(-2.0..2.0);
            labels.push(label);
        }
        BinaryTrainingSet {
            entry_index: 0,
            inputs,
            labels,
        }
    }

    #[test]
    fn learns_separable_toy_set() {
        let data = separable_set(3);
        let cfg = TrainConfig {
            epochs: 200,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&default_adnn_architecture(), &data, &cfg).unwrap();
        assert_eq!(out.report.train_accuracy, 1.0);
        assert!(out.report.final_loss <= out.report.initial_loss);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = separable_set(3);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&default_adnn_architecture(), &data, &cfg).unwrap();
        let init = MlpModel::init_uniform(2, &default_adnn_architecture(), 1.0, 5).unwrap();
        assert_eq!(out.model, init);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable_set(8);
        let cfg = TrainConfig {
            epochs: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let a = train(&default_adnn_architecture(), &data, &cfg).unwrap();
        let b = train(&default_adnn_architecture(), &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let mini = TrainConfig { batch_size: 8, ..cfg };
        let c = train(&default_adnn_architecture(), &data, &mini).unwrap();
        let d = train(&default_adnn_architecture(), &data, &mini).unwrap();
        assert_eq!(c.model, d.model);
    }

    #[test]
    fn training_errors() {
        let empty = BinaryTrainingSet {
            entry_index: 0,
            inputs: DMatrix::zeros(2, 0),
            labels: vec![],
        };
        assert!(train(&default_adnn_architecture(), &empty, &TrainConfig::default()).is_err());
        let data = separable_set(1);
        assert!(train(&[LayerSpec::relu(3)], &data, &TrainConfig::default()).is_err());
        let huge = TrainConfig {
            learning_rate: 1e200,
            epochs: 5,
            init_scale: 1e100,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&default_adnn_architecture(), &data, &huge),
            Err(Error::Diverged { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn probabilities_normalize(seed in any::<u64>(), v in prop::collection::vec(-50.0f64..50.0, 3)) {
            let m = random_model(seed, 3, &default_adnn_architecture());
            let y = DVector::from_vec(v);
            let (pp, pm) = forward_probs(&m, &y).unwrap();
            prop_assert!((pp + pm - 1.0).abs() <= 1e-12);
            prop_assert!(pp > 0.0 && pm > 0.0);
        }

        #[test]
        fn swapping_head_rows_inverts_ratio(seed in any::<u64>(), v in prop::collection::vec(-3.0f64..3.0, 3)) {
            let m = random_model(seed, 3, &default_adnn_architecture());
            let mut swapped = m.clone();
            let head = swapped.layers_mut().last_mut().unwrap();
            head.weights.swap_rows(0, 1);
            head.bias.swap_rows(0, 1);
            let y = DVector::from_vec(v);
            let a = log_likelihood_ratio(&m, &y).unwrap();
            let b = log_likelihood_ratio(&swapped, &y).unwrap();
            prop_assert_eq!(a, -b);
        }
    }
}
