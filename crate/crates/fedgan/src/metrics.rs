//! Generator quality scores and the cost model.
//!
//! Generators are scored against a frozen classifier (a stand-in for a
//! fixed inception network) and against Gaussian statistics of real
//! samples:
//!
//! - proxy inception score: exp of the mean KL between per-sample class
//!   conditionals and their marginal; 1 is worst, the class count is
//!   best.
//! - 2-D Fréchet distance between Gaussians fitted to real and fake
//!   samples; 0 is best.
//! - mode coverage: how many mixture modes receive enough nearby
//!   samples.
//! - stability: max minus min of a score list, summarising how much a
//!   metric swings across client counts.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_ring_mixture, next_batch_labeled, BatchStream, MixtureSpec};
use crate::nn::{
    forward, init_params, sample_generator, softmax_xent_loss_and_grad, sgd_step, NetSpec, NnError,
    OptimizerState, OutputActivation, WeightVector,
};
use crate::orchestrator::Arch;
use crate::stream::{derive_seed, stream, Purpose};

/// Probability floor inside KL logarithms.
pub const KL_EPS: f64 = 1e-12;

/// Diagonal regularization added to every fitted covariance.
pub const COV_REG: f64 = 1e-6;

/// Held-out accuracy a frozen classifier must reach before it may score
/// generators.
pub const CLASSIFIER_ACCURACY_GATE: f64 = 0.95;

/// Errors from metric computation.
#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("cannot score an empty sample set")]
    EmptySamples,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("expected {expected}-dimensional samples, got {got}")]
    WrongDim { expected: usize, got: usize },
    #[error("classifier reached holdout accuracy {achieved:.4}, below the {gate} gate")]
    AccuracyGate { achieved: f64, gate: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A classifier trained once per mixture and then immutable, so every
/// architecture and round is scored by the same oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenClassifier {
    pub spec: NetSpec,
    pub weights: WeightVector,
    pub holdout_accuracy: f64,
    /// The mixture this classifier was trained for.
    pub mixture: MixtureSpec,
}

impl FrozenClassifier {
    /// Trains a 2-layer softmax classifier on fresh draws from `mixture`
    /// and verifies it on a held-out set. Fails if held-out accuracy is
    /// below [`CLASSIFIER_ACCURACY_GATE`].
    pub fn train(mixture: &MixtureSpec, seed: u64) -> Result<FrozenClassifier, MetricError> {
        let k = mixture.mode_count;
        let train_set = make_ring_mixture(
            &MixtureSpec { seed: derive_seed(seed, &[10]), ..*mixture },
            4000.max(8 * k),
        )
        .map_err(|_| MetricError::TooFewSamples { need: 8 * k, got: 0 })?;
        let holdout = make_ring_mixture(
            &MixtureSpec { seed: derive_seed(seed, &[11]), ..*mixture },
            1000.max(2 * k),
        )
        .map_err(|_| MetricError::TooFewSamples { need: 2 * k, got: 0 })?;

        let spec = NetSpec::new(vec![2, 32, k], OutputActivation::Softmax)?;
        let mut weights = init_params(&spec, derive_seed(seed, &[12]));
        let mut opt = OptimizerState::new(0.25, 0.0)?;
        let mut batches = BatchStream::new(train_set.len(), stream(seed, Purpose::Batch, &[13]));
        for _ in 0..3000 {
            let (batch, labels) = next_batch_labeled(&train_set, 64, &mut batches);
            let (_, grad) = softmax_xent_loss_and_grad(&spec, &weights, &batch, &labels)?;
            weights = sgd_step(&weights, &grad, &mut opt)?;
        }

        let probs = forward(&spec, &weights, &holdout.points)?;
        let mut correct = 0usize;
        for (row, &label) in probs.rows().into_iter().zip(&holdout.labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
        let holdout_accuracy = correct as f64 / holdout.len() as f64;
        if holdout_accuracy < CLASSIFIER_ACCURACY_GATE {
            return Err(MetricError::AccuracyGate {
                achieved: holdout_accuracy,
                gate: CLASSIFIER_ACCURACY_GATE,
            });
        }
        Ok(FrozenClassifier { spec, weights, holdout_accuracy, mixture: *mixture })
    }

    /// Class conditionals p(y|x) for each sample row.
    pub fn probabilities(&self, samples: &Array2<f64>) -> Result<Array2<f64>, MetricError> {
        Ok(forward(&self.spec, &self.weights, samples)?)
    }

    /// Number of classes this classifier separates.
    pub fn class_count(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("classifier serializes")
    }

    pub fn from_json(json: &str) -> Result<FrozenClassifier, serde_json::Error> {
        serde_json::from_str(json)
    }
}

/// Proxy inception score straight from a matrix of class conditionals
/// (rows sum to 1). exp(mean KL(p(y|x) || marginal)); always in
/// [1, class count].
pub fn proxy_is_from_conditionals(probs: &Array2<f64>) -> Result<f64, MetricError> {
    if probs.nrows() == 0 {
        return Err(MetricError::EmptySamples);
    }
    let marginal = probs.mean_axis(Axis(0)).expect("nonempty");
    let mut kl_sum = 0.0;
    for row in probs.rows() {
        for (&p, &q) in row.iter().zip(marginal.iter()) {
            kl_sum += p * (p.max(KL_EPS).ln() - q.max(KL_EPS).ln());
        }
    }
    Ok((kl_sum / probs.nrows() as f64).exp())
}

/// Proxy inception score of generated samples under a frozen classifier.
pub fn proxy_is(samples: &Array2<f64>, clf: &FrozenClassifier) -> Result<f64, MetricError> {
    if samples.nrows() == 0 {
        return Err(MetricError::EmptySamples);
    }
    proxy_is_from_conditionals(&clf.probabilities(samples)?)
}

fn fit_gaussian_2d(x: &Array2<f64>) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.nrows() as f64;
    let mean = [x.column(0).sum() / n, x.column(1).sum() / n];
    let mut cov = [[0.0; 2]; 2];
    for row in x.rows() {
        let dx = row[0] - mean[0];
        let dy = row[1] - mean[1];
        cov[0][0] += dx * dx;
        cov[0][1] += dx * dy;
        cov[1][1] += dy * dy;
    }
    cov[0][0] /= n;
    cov[0][1] /= n;
    cov[1][1] /= n;
    cov[1][0] = cov[0][1];
    (mean, cov)
}

/// Tr((A B)^{1/2}) for 2x2 symmetric positive semidefinite A, B, using
/// the closed form sqrt(Tr(AB) + 2 sqrt(det A det B)).
pub fn sqrt_trace_2x2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    let tr_ab = a[0][0] * b[0][0]
        + a[0][1] * b[1][0]
        + a[1][0] * b[0][1]
        + a[1][1] * b[1][1];
    let det_a = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let det_b = b[0][0] * b[1][1] - b[0][1] * b[1][0];
    let inner = tr_ab + 2.0 * (det_a * det_b).max(0.0).sqrt();
    inner.max(0.0).sqrt()
}

/// Fréchet distance between Gaussians fitted to two 2-D sample sets:
/// `|mu_r - mu_f|^2 + Tr(C_r + C_f - 2 (C_r C_f)^{1/2})`. Covariances
/// use the population (1/n) estimator plus [`COV_REG`] on the diagonal.
/// A numerically negative result is clipped to 0 with a warning.
pub fn frechet_2d(real: &Array2<f64>, fake: &Array2<f64>) -> Result<f64, MetricError> {
    for set in [real, fake] {
        if set.ncols() != 2 {
            return Err(MetricError::WrongDim { expected: 2, got: set.ncols() });
        }
        if set.nrows() < 2 {
            return Err(MetricError::TooFewSamples { need: 2, got: set.nrows() });
        }
    }
    let (mu_r, mut c_r) = fit_gaussian_2d(real);
    let (mu_f, mut c_f) = fit_gaussian_2d(fake);
    for c in [&mut c_r, &mut c_f] {
        c[0][0] += COV_REG;
        c[1][1] += COV_REG;
    }
    let mean_term =
        (mu_r[0] - mu_f[0]) * (mu_r[0] - mu_f[0]) + (mu_r[1] - mu_f[1]) * (mu_r[1] - mu_f[1]);
    let trace_term =
        c_r[0][0] + c_r[1][1] + c_f[0][0] + c_f[1][1] - 2.0 * sqrt_trace_2x2(&c_r, &c_f);
    let fid = mean_term + trace_term;
    if fid < 0.0 {
        log::warn!("clipping negative frechet {fid:.3e} to 0");
        return Ok(0.0);
    }
    Ok(fid)
}

/// Per-mode sample counts: how many rows fall within 3 sigma (Euclidean)
/// of each mode centre.
pub fn mode_counts(samples: &Array2<f64>, mixture: &MixtureSpec) -> Vec<usize> {
    assert_eq!(samples.ncols(), 2, "mode counting is defined on 2-D samples");
    let radius = 3.0 * mixture.sigma;
    let r2 = radius * radius;
    let mut counts = vec![0usize; mixture.mode_count];
    for row in samples.rows() {
        for (j, count) in counts.iter_mut().enumerate() {
            let (cx, cy) = mixture.mode_center(j);
            let dx = row[0] - cx;
            let dy = row[1] - cy;
            if dx * dx + dy * dy <= r2 {
                *count += 1;
            }
        }
    }
    counts
}

/// Default evidence threshold for calling a mode covered: 10 samples per
/// 1000, at least 1.
pub fn default_min_count(n_samples: usize) -> usize {
    (n_samples / 100).max(1)
}

/// Number of modes with at least `min_count` samples within 3 sigma of
/// their centre. Thresholds below 1 are raised to 1.
pub fn mode_coverage(samples: &Array2<f64>, mixture: &MixtureSpec, min_count: usize) -> usize {
    let threshold = min_count.max(1);
    mode_counts(samples, mixture)
        .into_iter()
        .filter(|&c| c >= threshold)
        .count()
}

/// Max minus min of a score list.
pub fn stability(scores: &[f64]) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptySamples);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Inputs to the complexity estimates. `object_size` is the size of one
/// dataset object; it is carried for report context and does not enter
/// the estimates themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub object_size: f64,
    pub batch: f64,
    pub epochs: f64,
    /// Objects in each client's local dataset.
    pub per_client_objects: Vec<f64>,
    /// Size of each client's model.
    pub model_sizes: Vec<f64>,
    pub x: usize,
    pub y: usize,
}

/// Scalar compute and space estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub compute: f64,
    pub space: f64,
}

/// Evaluates the per-architecture complexity estimates:
/// compute `e*b*sum_i |w_i| / D_i`, space `sum_i |w_i|`; the all-vs-all
/// architecture multiplies each client's term by its X*Y replicas.
pub fn cost_model(c: &CostInputs, arch: Arch) -> Result<CostEstimate, MetricError> {
    if c.per_client_objects.len() != c.model_sizes.len() {
        return Err(MetricError::WrongDim {
            expected: c.per_client_objects.len(),
            got: c.model_sizes.len(),
        });
    }
    if c.per_client_objects.is_empty() {
        return Err(MetricError::EmptySamples);
    }
    let positive = c.object_size > 0.0
        && c.batch > 0.0
        && c.epochs > 0.0
        && c.x >= 1
        && c.y >= 1
        && c.per_client_objects.iter().all(|&v| v > 0.0)
        && c.model_sizes.iter().all(|&v| v > 0.0);
    if !positive {
        return Err(MetricError::EmptySamples);
    }
    let multiplier = match arch {
        Arch::MultiFlgan => (c.x * c.y) as f64,
        Arch::Flgan | Arch::Aflgan => 1.0,
    };
    let mut compute = 0.0;
    let mut space = 0.0;
    for (&objects, &size) in c.per_client_objects.iter().zip(&c.model_sizes) {
        compute += multiplier * size / objects;
        space += multiplier * size;
    }
    Ok(CostEstimate { compute: c.epochs * c.batch * compute, space })
}

/// One metric snapshot of a generator at a given round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub round: usize,
    pub proxy_is: f64,
    pub frechet: f64,
    pub mode_coverage: usize,
    pub per_mode_counts: Vec<usize>,
}

/// Everything needed to score a generator: the frozen classifier, a
/// fixed real evaluation set, and the mixture geometry.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub clf: FrozenClassifier,
    pub real_eval: Array2<f64>,
    pub eval_samples: usize,
}

impl Scorer {
    /// Builds the scorer: trains (or reuses) the classifier and draws a
    /// fixed real evaluation set from the mixture.
    pub fn new(
        clf: FrozenClassifier,
        eval_samples: usize,
        eval_seed: u64,
    ) -> Result<Scorer, MetricError> {
        let real = make_ring_mixture(
            &MixtureSpec { seed: eval_seed, ..clf.mixture },
            eval_samples.max(2),
        )
        .map_err(|_| MetricError::TooFewSamples { need: 2, got: 0 })?;
        Ok(Scorer { clf, real_eval: real.points, eval_samples: eval_samples.max(2) })
    }

    /// Scores one generator: draws `eval_samples` from it with `rng` and
    /// reports all metrics at `round`.
    pub fn score(
        &self,
        gen_spec: &NetSpec,
        w: &WeightVector,
        round: usize,
        rng: &mut impl Rng,
    ) -> Result<MetricReport, MetricError> {
        let fake = sample_generator(gen_spec, w, self.eval_samples, rng)?;
        let proxy = proxy_is(&fake, &self.clf)?;
        let frechet = frechet_2d(&self.real_eval, &fake)?;
        let counts = mode_counts(&fake, &self.clf.mixture);
        let threshold = default_min_count(self.eval_samples);
        let coverage = counts.iter().filter(|&&c| c >= threshold).count();
        Ok(MetricReport {
            round,
            proxy_is: proxy,
            frechet,
            mode_coverage: coverage,
            per_mode_counts: counts,
        })
    }

    /// Proxy inception score only, for termination-time model selection.
    pub fn proxy_is_only(
        &self,
        gen_spec: &NetSpec,
        w: &WeightVector,
        rng: &mut impl Rng,
    ) -> Result<f64, MetricError> {
        let fake = sample_generator(gen_spec, w, self.eval_samples, rng)?;
        proxy_is(&fake, &self.clf)
    }
}
