//! Multilayer perceptrons: activations, seeded initializers, forward passes
//! that keep every tap point, and a minibatch SGD-with-momentum trainer on a
//! softmax cross-entropy loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::Dataset;
use crate::linalg::{self, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: LinalgError,
    },
    #[error("layer {layer} expects {expected} inputs but receives {got}")]
    Chain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: bias has length {got}, expected {expected}")]
    BiasLength {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("a network needs at least one layer")]
    Empty,
    #[error("unknown activation '{0}' (expected relu, sigmoid, tanh or identity)")]
    UnknownActivation(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} is out of range for a network with {outputs} outputs")]
    LabelRange { label: usize, outputs: usize },
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; the learning rate is probably too high"
    )]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and the output `y = h(x)`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    /// `h(s·x) == s·h(x)` for every `s ≥ 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            _ => Err(NetworkError::UnknownActivation(s.to_string())),
        }
    }
}

pub fn apply_activation(activation: Activation, m: &Matrix) -> Matrix {
    // Every activation maps finite inputs to finite outputs.
    m.map(|v| activation.apply_scalar(v))
        .expect("activations preserve finiteness")
}

/// Zero-mean Gaussian weights: variance `2/d_in` for relu (He), `1/d_in`
/// otherwise (Xavier-style).
pub fn init_weights(d_in: usize, d_out: usize, activation: Activation, seed: u64) -> Matrix {
    assert!(
        d_in >= 1 && d_out >= 1,
        "init_weights needs positive dimensions"
    );
    let gain = match activation {
        Activation::Relu => 2.0,
        _ => 1.0,
    };
    let std = (gain / d_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..d_in * d_out).map(|_| normal.sample(&mut rng)).collect();
    Matrix::from_vec(d_in, d_out, data).expect("gaussian samples are finite")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Option<Vec<f64>>,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(NetworkError::BiasLength {
                    layer: 0,
                    expected: weight.cols(),
                    got: b.len(),
                });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(LinalgError::NonFinite { op: "Layer::new" }.into());
            }
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    /// Pre-activation `input · W (+ b)`.
    pub fn pre_activation(&self, input: &Matrix) -> std::result::Result<Matrix, LinalgError> {
        let o = linalg::matmul(input, &self.weight)?;
        match &self.bias {
            Some(b) => o.add_row_broadcast(b),
            None => Ok(o),
        }
    }
}

/// Per-layer pre-activations `O` and activations `A` of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapOutputs {
    pub pre_activations: Vec<Matrix>,
    pub activations: Vec<Matrix>,
}

impl TapOutputs {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::Empty);
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(NetworkError::Chain {
                    layer: k + 1,
                    expected: pair[1].d_in(),
                    got: pair[0].d_out(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Fresh network with seeded weights, zero biases, `hidden` activation on
    /// every hidden layer and identity logits on the last.
    pub fn random(widths: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(NetworkError::BadConfig(format!(
                "architecture needs at least two positive widths, got {widths:?}"
            )));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k == last {
                    Activation::Identity
                } else {
                    hidden
                };
                let weight = init_weights(w[0], w[1], hidden, seed.wrapping_add(k as u64));
                Layer::new(weight, Some(vec![0.0; w[1]]), act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Widths `[D_0, D_1, …, D_L]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::d_out))
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<TapOutputs> {
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 { x } else { &activations[k - 1] };
            if input.cols() != layer.d_in() {
                return Err(NetworkError::Chain {
                    layer: k,
                    expected: layer.d_in(),
                    got: input.cols(),
                });
            }
            let o = layer
                .pre_activation(input)
                .map_err(|source| NetworkError::Layer { layer: k, source })?;
            activations.push(apply_activation(layer.activation, &o));
            pre_activations.push(o);
        }
        Ok(TapOutputs {
            pre_activations,
            activations,
        })
    }

    /// Final-layer activations only, computed in row chunks.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        const CHUNK: usize = 2048;
        if x.rows() <= CHUNK {
            return Ok(self.forward(x)?.activations.pop().expect("non-empty"));
        }
        let mut out: Option<Matrix> = None;
        for start in (0..x.rows()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(x.rows())).collect();
            let part = self
                .forward(&x.select_rows(&idx))?
                .activations
                .pop()
                .expect("non-empty");
            out = Some(match out {
                None => part,
                Some(acc) => acc.vstack(&part)?,
            });
        }
        Ok(out.expect("x has rows"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            epochs: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::BadConfig(m.to_string()));
        // A zero learning rate is allowed: it is the "no update" limit.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// One row of the training history. Epoch 0 is the untrained state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Gradients for every layer, aligned with `Mlp::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
}

fn check_labels(labels: &[usize], outputs: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= outputs) {
        Some(&label) => Err(NetworkError::LabelRange { label, outputs }),
        None => Ok(()),
    }
}

/// Row-wise softmax cross-entropy: returns (mean loss, dL/dA of the output).
fn softmax_cross_entropy(outputs: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = outputs.rows();
    let c = outputs.cols();
    let mut grad = Vec::with_capacity(n * c);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = outputs.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[label];
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum;
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    let grad = Matrix::from_vec(n, c, grad).unwrap_or_else(|_| Matrix::zeros(n, c));
    (loss / n as f64, grad)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean softmax cross-entropy (+ `weight_decay/2 · Σ‖W‖²`) and its gradient
/// with respect to every weight and bias.
pub fn loss_and_gradients(
    mlp: &Mlp,
    x: &Matrix,
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    backprop(mlp, x, labels, weight_decay).map(|(loss, grads, _)| (loss, grads))
}

fn backprop(
    mlp: &Mlp,
    x: &Matrix,
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, Gradients, Matrix)> {
    if x.rows() == 0 || x.rows() != labels.len() {
        return Err(NetworkError::EmptyDataset);
    }
    check_labels(labels, mlp.output_dim())?;
    let mut taps = mlp.forward(x)?;
    let (mut loss, mut delta_a) = softmax_cross_entropy(taps.output(), labels);
    let layers = mlp.layers();
    let mut weights = vec![Matrix::zeros(0, 0); layers.len()];
    let mut biases = vec![None; layers.len()];
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        let o = &taps.pre_activations[k];
        let a = &taps.activations[k];
        let dz: Vec<f64> = delta_a
            .as_slice()
            .iter()
            .zip(o.as_slice().iter().zip(a.as_slice()))
            .map(|(g, (&ov, &av))| g * layer.activation.derivative(ov, av))
            .collect();
        let dz = Matrix::from_vec(o.rows(), o.cols(), dz)?;
        let input = if k == 0 { x } else { &taps.activations[k - 1] };
        let mut gw = linalg::matmul_tn(input, &dz)?;
        if weight_decay > 0.0 {
            let w = layer.weight.as_slice();
            let data: Vec<f64> = gw
                .as_slice()
                .iter()
                .zip(w)
                .map(|(g, wv)| g + weight_decay * wv)
                .collect();
            gw = Matrix::from_vec(gw.rows(), gw.cols(), data)?;
            loss += 0.5 * weight_decay * layer.weight.frobenius_norm_sq();
        }
        weights[k] = gw;
        if layer.bias.is_some() {
            biases[k] = Some(
                dz.column_means()
                    .iter()
                    .map(|m| m * dz.rows() as f64)
                    .collect(),
            );
        }
        if k > 0 {
            delta_a = linalg::matmul_nt(&dz, &layer.weight)?;
        }
    }
    let output = taps.activations.pop().expect("non-empty");
    Ok((loss, Gradients { weights, biases }, output))
}

/// Mean cross-entropy and argmax accuracy.
pub fn evaluate(mlp: &Mlp, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    check_labels(data.labels(), mlp.output_dim())?;
    let out = mlp.predict(data.features())?;
    let (loss, _) = softmax_cross_entropy(&out, data.labels());
    let correct = data
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(out.row(*i)) == l)
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// Minibatch SGD with heavy-ball momentum:
/// `v ← μ·v + ∇(loss + wd/2·‖W‖²)`, `W ← W − lr·v`.
///
/// The returned history starts with the untrained state (epoch 0) followed by
/// one record per epoch holding the running mean training loss and accuracy.
pub fn train_sgd(mlp: &Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let (loss0, acc0) = evaluate(mlp, data)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        loss: loss0,
        accuracy: acc0,
    }];
    let mut layers: Vec<Layer> = mlp.layers().to_vec();
    let mut vel_w: Vec<Vec<f64>> = layers
        .iter()
        .map(|l| vec![0.0; l.weight.as_slice().len()])
        .collect();
    let mut vel_b: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.d_out()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.features().select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let net = Mlp { layers };
            let (loss, grads, out) =
                backprop(&net, &x, &labels, cfg.weight_decay).map_err(|e| match e {
                    NetworkError::Linalg(LinalgError::NonFinite { .. })
                    | NetworkError::Layer {
                        source: LinalgError::NonFinite { .. },
                        ..
                    } => NetworkError::Diverged { epoch, batch },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(NetworkError::Diverged { epoch, batch });
            }
            // Accuracy on the batch before the update.
            correct += labels
                .iter()
                .enumerate()
                .filter(|(i, &l)| argmax(out.row(*i)) == l)
                .count();
            loss_sum += loss * idx.len() as f64;
            layers = net.layers;
            for (k, layer) in layers.iter_mut().enumerate() {
                let (rows, cols) = layer.weight.shape();
                let mut w = std::mem::replace(&mut layer.weight, Matrix::zeros(0, 0)).into_vec();
                for ((wv, v), g) in w
                    .iter_mut()
                    .zip(vel_w[k].iter_mut())
                    .zip(grads.weights[k].as_slice())
                {
                    *v = cfg.momentum * *v + g;
                    *wv -= cfg.learning_rate * *v;
                }
                layer.weight = Matrix::from_vec(rows, cols, w)
                    .map_err(|_| NetworkError::Diverged { epoch, batch })?;
                if let (Some(b), Some(gb)) = (layer.bias.as_mut(), grads.biases[k].as_ref()) {
                    for ((bv, v), g) in b.iter_mut().zip(vel_b[k].iter_mut()).zip(gb) {
                        *v = cfg.momentum * *v + g;
                        *bv -= cfg.learning_rate * *v;
                    }
                    if b.iter().any(|v| !v.is_finite()) {
                        return Err(NetworkError::Diverged { epoch, batch });
                    }
                }
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train acc {:.4}",
            record.loss,
            record.accuracy
        );
        history.push(record);
    }
    Ok((Mlp { layers }, history))
}
