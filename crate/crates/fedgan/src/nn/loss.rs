//! GAN losses and the classifier loss, each returning `(loss, gradient)`.
//!
//! Losses are computed from the output-layer logits in stable form
//! (softplus / log-sum-exp), so a saturated discriminator yields a finite
//! loss and gradient instead of `ln 0`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{backward, forward_trace, sigmoid, NetSpec, NnError, OutputActivation, WeightVector};

/// Which surrogate the generator minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenLossKind {
    /// `-E[ln D(G(z))]`, the standard practical surrogate.
    #[default]
    NonSaturating,
    /// `E[ln(1 - D(G(z)))]`, the original minimax form.
    Minimax,
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy discriminator loss over a real and a fake batch.
///
/// Targets are 1 for real rows and 0 for fake rows; the two per-batch
/// means contribute half each. Returns the analytic gradient with the
/// same layout as `w_d`.
pub fn disc_loss_and_grad(
    spec: &NetSpec,
    w_d: &WeightVector,
    real: &Array2<f64>,
    fake: &Array2<f64>,
) -> Result<(f64, WeightVector), NnError> {
    if spec.output_activation != OutputActivation::Sigmoid || spec.output_dim() != 1 {
        return Err(NnError::WrongOutputActivation {
            context: "discriminator loss",
            expected: OutputActivation::Sigmoid,
        });
    }
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(NnError::EmptyBatch);
    }
    let n_real = real.nrows();
    let n_fake = fake.nrows();

    let mut stacked = Array2::zeros((n_real + n_fake, spec.input_dim()));
    if real.ncols() != spec.input_dim() || fake.ncols() != spec.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: spec.input_dim(),
            got: if real.ncols() != spec.input_dim() {
                real.ncols()
            } else {
                fake.ncols()
            },
        });
    }
    stacked.slice_mut(ndarray::s![..n_real, ..]).assign(real);
    stacked.slice_mut(ndarray::s![n_real.., ..]).assign(fake);

    let trace = forward_trace(spec, w_d, &stacked)?;

    let mut loss = 0.0;
    let mut delta = Array2::zeros((n_real + n_fake, 1));
    for r in 0..n_real {
        let z = trace.logits[(r, 0)];
        loss += softplus(-z) / (2.0 * n_real as f64);
        delta[(r, 0)] = (sigmoid(z) - 1.0) / (2.0 * n_real as f64);
    }
    for r in 0..n_fake {
        let z = trace.logits[(n_real + r, 0)];
        loss += softplus(z) / (2.0 * n_fake as f64);
        delta[(n_real + r, 0)] = sigmoid(z) / (2.0 * n_fake as f64);
    }

    let (grad, _) = backward(spec, w_d, &trace, delta)?;
    Ok((loss, grad))
}

/// Generator loss through a frozen discriminator.
///
/// Gradient flows through the discriminator into the generator; only the
/// generator gradient is returned, `w_d` is held fixed.
pub fn gen_loss_and_grad(
    spec_g: &NetSpec,
    spec_d: &NetSpec,
    w_g: &WeightVector,
    w_d: &WeightVector,
    noise: &Array2<f64>,
    kind: GenLossKind,
) -> Result<(f64, WeightVector), NnError> {
    if spec_d.output_activation != OutputActivation::Sigmoid || spec_d.output_dim() != 1 {
        return Err(NnError::WrongOutputActivation {
            context: "generator loss",
            expected: OutputActivation::Sigmoid,
        });
    }
    if noise.nrows() == 0 {
        return Err(NnError::EmptyBatch);
    }
    if noise.ncols() != spec_g.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: spec_g.input_dim(),
            got: noise.ncols(),
        });
    }
    if spec_g.output_dim() != spec_d.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: spec_d.input_dim(),
            got: spec_g.output_dim(),
        });
    }
    let n = noise.nrows() as f64;

    let g_trace = forward_trace(spec_g, w_g, noise)?;
    let d_trace = forward_trace(spec_d, w_d, g_trace.output())?;

    let mut loss = 0.0;
    let mut delta_d = Array2::zeros((noise.nrows(), 1));
    for r in 0..noise.nrows() {
        let u = d_trace.logits[(r, 0)];
        match kind {
            GenLossKind::NonSaturating => {
                loss += softplus(-u) / n;
                delta_d[(r, 0)] = (sigmoid(u) - 1.0) / n;
            }
            GenLossKind::Minimax => {
                loss += -softplus(u) / n;
                delta_d[(r, 0)] = -sigmoid(u) / n;
            }
        }
    }

    // Through D (its gradient is discarded), then through G's output
    // activation, then through G.
    let (_, d_fake) = backward(spec_d, w_d, &d_trace, delta_d)?;
    let delta_g_out = output_delta(spec_g.output_activation, g_trace.output(), &d_fake);
    let (grad_g, _) = backward(spec_g, w_g, &g_trace, delta_g_out)?;
    Ok((loss, grad_g))
}

/// Convert dL/d(activation) at a network's output into dL/d(logits).
fn output_delta(kind: OutputActivation, act: &Array2<f64>, dact: &Array2<f64>) -> Array2<f64> {
    match kind {
        OutputActivation::Tanh => {
            let mut d = dact.clone();
            for (v, a) in d.iter_mut().zip(act.iter()) {
                *v *= 1.0 - a * a;
            }
            d
        }
        OutputActivation::Sigmoid => {
            let mut d = dact.clone();
            for (v, a) in d.iter_mut().zip(act.iter()) {
                *v *= a * (1.0 - a);
            }
            d
        }
        OutputActivation::Softmax => {
            // Row-wise Jacobian: dz_i = a_i (dact_i - sum_j dact_j a_j).
            let mut d = Array2::zeros(dact.dim());
            for r in 0..dact.nrows() {
                let dot: f64 = (0..dact.ncols()).map(|j| dact[(r, j)] * act[(r, j)]).sum();
                for i in 0..dact.ncols() {
                    d[(r, i)] = act[(r, i)] * (dact[(r, i)] - dot);
                }
            }
            d
        }
    }
}

/// Mean cross-entropy of a softmax classifier against integer labels.
pub fn softmax_xent_loss_and_grad(
    spec: &NetSpec,
    w: &WeightVector,
    batch: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, WeightVector), NnError> {
    if spec.output_activation != OutputActivation::Softmax {
        return Err(NnError::WrongOutputActivation {
            context: "cross-entropy loss",
            expected: OutputActivation::Softmax,
        });
    }
    if batch.nrows() == 0 {
        return Err(NnError::EmptyBatch);
    }
    if batch.nrows() != labels.len() {
        return Err(NnError::DimensionMismatch {
            expected: batch.nrows(),
            got: labels.len(),
        });
    }
    let k = spec.output_dim();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(NnError::InvalidSpec(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let n = batch.nrows() as f64;

    let trace = forward_trace(spec, w, batch)?;
    let probs = trace.output();

    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        // log p_y from logits: z_y - logsumexp(z)
        let row = trace.logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        loss += (lse - trace.logits[(r, y)]) / n;
    }

    let mut delta = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        delta[(r, y)] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);

    let (grad, _) = backward(spec, w, &trace, delta)?;
    Ok((loss, grad))
}
