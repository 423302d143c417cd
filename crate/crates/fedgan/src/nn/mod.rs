//! Minimal dense networks with manual backpropagation.
//!
//! Networks are fully connected stacks described by a [`NetSpec`]: hidden
//! layers use leaky ReLU (slope 0.2), the output layer uses tanh, sigmoid
//! or softmax. All parameters of a network live in a single flat
//! [`WeightVector`], weights then biases layer by layer, because flat
//! vectors are the unit of every aggregation rule in the protocol.
//!
//! All arithmetic is f64. Functions here are pure: same inputs, bit-equal
//! outputs, no shared state.

mod loss;

pub use loss::{disc_loss_and_grad, gen_loss_and_grad, softmax_xent_loss_and_grad, GenLossKind};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{self, Purpose};

/// Negative slope of the leaky ReLU used by every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Borrowed (weights, biases) pair per layer, in layout order.
pub type LayerViews<'a> = Vec<(ArrayView2<'a, f64>, &'a [f64])>;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight vector has {got} values, spec requires {expected}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{context} requires {expected:?} output activation")]
    WrongOutputActivation {
        context: &'static str,
        expected: OutputActivation,
    },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
}

/// Hidden-layer activation. Only leaky ReLU is supported; the slope is
/// fixed at [`LEAKY_SLOPE`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenActivation {
    #[default]
    LeakyRelu,
}

/// Activation of the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Range (-1, 1); generators.
    Tanh,
    /// Range (0, 1); discriminators.
    Sigmoid,
    /// Probability simplex; classifiers.
    Softmax,
}

/// Shape of a dense network: layer sizes plus activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidSpec(format!(
                "need at least 2 layers, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(NnError::InvalidSpec("all layer sizes must be >= 1".into()));
        }
        Ok(NetSpec {
            layer_sizes,
            hidden_activation: HiddenActivation::LeakyRelu,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers (one less than the number of size entries).
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: sum of `in*out + out` over layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (fan_in, fan_out) of weight layer `l`.
    fn dims(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    /// Validate and re-wrap after deserialization.
    pub fn validate(&self) -> Result<(), NnError> {
        NetSpec::new(self.layer_sizes.clone(), self.output_activation).map(|_| ())
    }
}

/// Flat parameter vector of one network.
///
/// Layout, fixed by convention: for each weight layer `l` in order, the
/// `in*out` weights in input-major order (`w[i*out + j]` connects input
/// `i` to output `j`), followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn zeros(len: usize) -> Self {
        WeightVector {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        WeightVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Round every value to the nearest f32. Checkpoints store f32, so
    /// the run state is snapped to f32 at every checkpoint boundary to
    /// keep resumed runs bit-identical to uninterrupted ones.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    fn check_layout(&self, spec: &NetSpec) -> Result<(), NnError> {
        if self.len() != spec.param_count() {
            return Err(NnError::LayoutMismatch {
                expected: spec.param_count(),
                got: self.len(),
            });
        }
        Ok(())
    }

    /// Views of (weights, biases) per layer, in layout order.
    pub fn layers<'a>(&'a self, spec: &NetSpec) -> Result<LayerViews<'a>, NnError> {
        self.check_layout(spec)?;
        let mut out = Vec::with_capacity(spec.depth());
        let mut off = 0;
        for l in 0..spec.depth() {
            let (fan_in, fan_out) = spec.dims(l);
            let w = ArrayView2::from_shape((fan_in, fan_out), &self.values[off..off + fan_in * fan_out])
                .expect("layout checked");
            off += fan_in * fan_out;
            let b = &self.values[off..off + fan_out];
            off += fan_out;
            out.push((w, b));
        }
        Ok(out)
    }

    /// Rebuild a flat vector from per-layer (weights, biases) pieces.
    pub fn from_layers(spec: &NetSpec, layers: &[(Array2<f64>, Vec<f64>)]) -> Result<Self, NnError> {
        let mut values = Vec::with_capacity(spec.param_count());
        for (l, (w, b)) in layers.iter().enumerate() {
            let (fan_in, fan_out) = spec.dims(l);
            if w.dim() != (fan_in, fan_out) || b.len() != fan_out {
                return Err(NnError::LayoutMismatch {
                    expected: spec.param_count(),
                    got: 0,
                });
            }
            values.extend(w.iter().copied());
            values.extend_from_slice(b);
        }
        let v = WeightVector { values };
        v.check_layout(spec)?;
        Ok(v)
    }
}

/// Step-size state for plain SGD with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<Self, NnError> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(NnError::InvalidSpec(format!(
                "learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(NnError::InvalidSpec(format!(
                "weight decay must be finite and >= 0, got {weight_decay}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            weight_decay,
            step_count: 0,
        })
    }
}

/// Deterministic scaled-uniform initialization: weights uniform in
/// `±sqrt(6/(fan_in+fan_out))` per layer, biases zero.
pub fn init_params(spec: &NetSpec, seed: u64) -> WeightVector {
    let mut rng = stream::stream(seed, Purpose::Init, &[]);
    let mut values = Vec::with_capacity(spec.param_count());
    for l in 0..spec.depth() {
        let (fan_in, fan_out) = spec.dims(l);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-limit..limit));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    WeightVector { values }
}

fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Derivative of leaky ReLU recovered from its own output (sign-preserving).
fn leaky_relu_deriv_from_act(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn apply_output(kind: OutputActivation, z: Array2<f64>) -> Array2<f64> {
    let mut z = z;
    match kind {
        OutputActivation::Tanh => z.mapv_inplace(f64::tanh),
        OutputActivation::Sigmoid => z.mapv_inplace(sigmoid),
        OutputActivation::Softmax => softmax_rows(&mut z),
    }
    z
}

/// Forward pass trace: the post-activation output of every layer, with
/// the input batch at index 0, plus the raw logits of the output layer.
pub(crate) struct ForwardTrace {
    pub activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

pub(crate) fn forward_trace(
    spec: &NetSpec,
    w: &WeightVector,
    batch: &Array2<f64>,
) -> Result<ForwardTrace, NnError> {
    if batch.ncols() != spec.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: spec.input_dim(),
            got: batch.ncols(),
        });
    }
    let layers = w.layers(spec)?;
    let mut activations = Vec::with_capacity(spec.depth() + 1);
    activations.push(batch.clone());
    let mut logits = None;
    for (l, (wm, b)) in layers.iter().enumerate() {
        let prev = activations.last().unwrap();
        let mut z = prev.dot(wm);
        for mut row in z.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b.iter()) {
                *v += bias;
            }
        }
        if l + 1 == spec.depth() {
            logits = Some(z.clone());
            activations.push(apply_output(spec.output_activation, z));
        } else {
            z.mapv_inplace(leaky_relu);
            activations.push(z);
        }
    }
    Ok(ForwardTrace {
        activations,
        logits: logits.unwrap(),
    })
}

/// Run a batch (rows = samples) through the network.
pub fn forward(spec: &NetSpec, w: &WeightVector, batch: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    let trace = forward_trace(spec, w, batch)?;
    Ok(trace.activations.into_iter().next_back().unwrap())
}

/// A matrix of independent standard-normal draws, used as generator
/// noise.
pub fn noise_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Draws `n` noise rows from `rng` and maps them through a generator.
/// Noise width is the generator's input dimension.
pub fn sample_generator(
    spec: &NetSpec,
    w: &WeightVector,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>, NnError> {
    let noise = noise_matrix(n, spec.input_dim(), rng);
    forward(spec, w, &noise)
}

/// Backpropagate from `delta` = dL/dz at the output layer.
///
/// Returns the parameter gradient (same layout as `w`) and dL/d(input),
/// which callers use to chain networks.
pub(crate) fn backward(
    spec: &NetSpec,
    w: &WeightVector,
    trace: &ForwardTrace,
    delta_out: Array2<f64>,
) -> Result<(WeightVector, Array2<f64>), NnError> {
    let layers = w.layers(spec)?;
    let mut grad = vec![0.0; spec.param_count()];

    // Byte offsets of each layer inside the flat vector.
    let mut offsets = Vec::with_capacity(spec.depth());
    let mut off = 0;
    for l in 0..spec.depth() {
        let (fan_in, fan_out) = spec.dims(l);
        offsets.push(off);
        off += fan_in * fan_out + fan_out;
    }

    let mut delta = delta_out;
    for l in (0..spec.depth()).rev() {
        let (fan_in, fan_out) = spec.dims(l);
        let a_prev = &trace.activations[l];
        // dW = a_prev^T . delta, db = column sums of delta
        let dw = a_prev.t().dot(&delta);
        let base = offsets[l];
        for i in 0..fan_in {
            for j in 0..fan_out {
                grad[base + i * fan_out + j] = dw[(i, j)];
            }
        }
        let bias_base = base + fan_in * fan_out;
        for j in 0..fan_out {
            grad[bias_base + j] = delta.column(j).sum();
        }
        // Propagate into layer l's input. activations[l] is that input;
        // for l > 0 it is the leaky-ReLU output of layer l-1, so fold in
        // the activation derivative here.
        let (wm, _) = &layers[l];
        let mut delta_prev = delta.dot(&wm.t());
        if l > 0 {
            for (d, h) in delta_prev.iter_mut().zip(trace.activations[l].iter()) {
                *d *= leaky_relu_deriv_from_act(*h);
            }
        }
        delta = delta_prev;
    }
    Ok((WeightVector { values: grad }, delta))
}

/// One SGD step: `w' = w - lr*grad - lr*decay*w`; bumps `step_count`.
pub fn sgd_step(
    w: &WeightVector,
    grad: &WeightVector,
    opt: &mut OptimizerState,
) -> Result<WeightVector, NnError> {
    if w.len() != grad.len() {
        return Err(NnError::LayoutMismatch {
            expected: w.len(),
            got: grad.len(),
        });
    }
    let lr = opt.learning_rate;
    let decay = opt.weight_decay;
    let values: Vec<f64> = w
        .values
        .iter()
        .zip(grad.values.iter())
        .map(|(&wi, &gi)| wi - lr * gi - lr * decay * wi)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("sgd_step"));
    }
    opt.step_count += 1;
    Ok(WeightVector { values })
}
