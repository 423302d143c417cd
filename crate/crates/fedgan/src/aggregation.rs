//! Weight-space aggregation rules.
//!
//! All rules operate on flat [`WeightVector`]s with identical layouts and
//! are pure: same inputs, bit-equal output, regardless of thread count.
//! [`fedavg`] is the default; [`coordinate_median`], [`trimmed_mean`] and
//! [`krum`] tolerate a bounded number of corrupted inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::WeightVector;

/// Errors from aggregation rules.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggError {
    #[error("cannot aggregate an empty list")]
    Empty,
    #[error("weight vectors have mismatched layouts: {0} vs {1}")]
    LayoutMismatch(usize, usize),
    #[error("trim_k={trim_k} leaves nothing to average over {n} vectors")]
    TrimTooLarge { trim_k: usize, n: usize },
    #[error("krum with f={f} needs at least {min} vectors, got {n}")]
    TooFewForKrum { f: usize, min: usize, n: usize },
    #[error("weights must be nonnegative with a positive sum")]
    BadWeights,
}

/// Selects which aggregation rule a run uses when collapsing the replica
/// updates of a federated learning unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    Fedavg,
    CoordinateMedian,
    TrimmedMean { trim_k: usize },
    Krum { f: usize },
}

impl AggregatorKind {
    /// Applies the rule to a list of same-layout weight vectors.
    pub fn apply(&self, ws: &[WeightVector]) -> Result<WeightVector, AggError> {
        match *self {
            AggregatorKind::Fedavg => fedavg(ws),
            AggregatorKind::CoordinateMedian => coordinate_median(ws),
            AggregatorKind::TrimmedMean { trim_k } => trimmed_mean(ws, trim_k),
            AggregatorKind::Krum { f } => krum(ws, f),
        }
    }
}

fn check_layouts(ws: &[WeightVector]) -> Result<usize, AggError> {
    let first = ws.first().ok_or(AggError::Empty)?;
    for w in &ws[1..] {
        if w.len() != first.len() {
            return Err(AggError::LayoutMismatch(first.len(), w.len()));
        }
    }
    Ok(first.len())
}

/// Unweighted coordinate-wise mean. Sums in input order so the result is
/// independent of scheduling.
pub fn fedavg(ws: &[WeightVector]) -> Result<WeightVector, AggError> {
    let dim = check_layouts(ws)?;
    let mut acc = vec![0.0; dim];
    for w in ws {
        for (a, v) in acc.iter_mut().zip(&w.values) {
            *a += v;
        }
    }
    let n = ws.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(WeightVector::from_values(acc))
}

/// Mean weighted by per-vector coefficients (for example sample counts).
/// Coefficients are normalised by their sum, so only ratios matter.
pub fn fedavg_weighted(ws: &[WeightVector], weights: &[f64]) -> Result<WeightVector, AggError> {
    let dim = check_layouts(ws)?;
    if weights.len() != ws.len() {
        return Err(AggError::LayoutMismatch(ws.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 || weights.iter().any(|&c| c < 0.0) {
        return Err(AggError::BadWeights);
    }
    let mut acc = vec![0.0; dim];
    for (w, &c) in ws.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(&w.values) {
            *a += c * v;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(WeightVector::from_values(acc))
}

/// Per-coordinate median. An even count averages the two middle values.
pub fn coordinate_median(ws: &[WeightVector]) -> Result<WeightVector, AggError> {
    let dim = check_layouts(ws)?;
    let n = ws.len();
    let mut out = Vec::with_capacity(dim);
    let mut column = vec![0.0; n];
    for i in 0..dim {
        for (c, w) in column.iter_mut().zip(ws) {
            *c = w.values[i];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        out.push(if n % 2 == 1 {
            column[n / 2]
        } else {
            (column[n / 2 - 1] + column[n / 2]) / 2.0
        });
    }
    Ok(WeightVector::from_values(out))
}

/// Per coordinate, drops the `trim_k` smallest and `trim_k` largest values
/// and averages the rest. `trim_k = 0` reduces to [`fedavg`].
pub fn trimmed_mean(ws: &[WeightVector], trim_k: usize) -> Result<WeightVector, AggError> {
    let dim = check_layouts(ws)?;
    let n = ws.len();
    if 2 * trim_k >= n {
        return Err(AggError::TrimTooLarge { trim_k, n });
    }
    let kept = (n - 2 * trim_k) as f64;
    let mut out = Vec::with_capacity(dim);
    let mut column = vec![0.0; n];
    for i in 0..dim {
        for (c, w) in column.iter_mut().zip(ws) {
            *c = w.values[i];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        out.push(column[trim_k..n - trim_k].iter().sum::<f64>() / kept);
    }
    Ok(WeightVector::from_values(out))
}

/// Krum score of each vector: the sum of squared distances to its
/// `n - f - 2` nearest neighbours (itself excluded).
pub fn krum_scores(ws: &[WeightVector], f: usize) -> Result<Vec<f64>, AggError> {
    check_layouts(ws)?;
    let n = ws.len();
    let min = 2 * f + 3;
    if n < min {
        return Err(AggError::TooFewForKrum { f, min, n });
    }
    let keep = n - f - 2;
    let mut dist2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = ws[i]
                .values
                .iter()
                .zip(&ws[j].values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist2[i][j] = d;
            dist2[j][i] = d;
        }
    }
    let mut scores = Vec::with_capacity(n);
    for (i, row) in dist2.iter().enumerate() {
        let mut others: Vec<f64> =
            row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).collect();
        others.sort_by(|a, b| a.total_cmp(b));
        scores.push(others[..keep].iter().sum());
    }
    Ok(scores)
}

/// Index of the vector Krum selects (minimal score, ties to the lowest
/// index). Requires `|ws| >= 2f + 3`.
pub fn krum_index(ws: &[WeightVector], f: usize) -> Result<usize, AggError> {
    let scores = krum_scores(ws, f)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Classic single-vector Krum: returns the input whose summed squared
/// distance to its nearest neighbours is smallest.
pub fn krum(ws: &[WeightVector], f: usize) -> Result<WeightVector, AggError> {
    Ok(ws[krum_index(ws, f)?].clone())
}

/// Index of the highest score; ties go to the lowest index. `None` on an
/// empty slice.
pub fn select_best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if s > scores[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Picks the candidate with the highest score; ties go to the earliest
/// candidate.
pub fn select_best(candidates: &[(WeightVector, f64)]) -> Result<WeightVector, AggError> {
    let scores: Vec<f64> = candidates.iter().map(|(_, s)| *s).collect();
    let idx = select_best_index(&scores).ok_or(AggError::Empty)?;
    Ok(candidates[idx].0.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{stream, Purpose};
    use rand::Rng;

    fn wv(values: &[f64]) -> WeightVector {
        WeightVector::from_values(values.to_vec())
    }

    fn random_set(n: usize, dim: usize, seed: u64) -> Vec<WeightVector> {
        let mut r = stream(seed, Purpose::Init, &[7]);
        (0..n)
            .map(|_| {
                WeightVector::from_values((0..dim).map(|_| r.random_range(-5.0..5.0)).collect())
            })
            .collect()
    }

    #[test]
    fn fedavg_idempotent_on_identical() {
        let v = wv(&[0.5, -1.5]);
        assert_eq!(fedavg(&[v.clone(), v.clone(), v.clone()]).unwrap(), v);
    }

    #[test]
    fn fedavg_arithmetic() {
        let got = fedavg(&[wv(&[0.0, 0.0]), wv(&[2.0, 4.0])]).unwrap();
        assert_eq!(got, wv(&[1.0, 2.0]));
    }

    #[test]
    fn fedavg_matches_per_coordinate_oracle() {
        let ws = random_set(7, 11, 1);
        let got = fedavg(&ws).unwrap();
        for i in 0..11 {
            let mean = ws.iter().map(|w| w.values[i]).sum::<f64>() / 7.0;
            assert!((got.values[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn fedavg_rejects_empty_and_mismatch() {
        assert_eq!(fedavg(&[]).unwrap_err(), AggError::Empty);
        assert_eq!(
            fedavg(&[wv(&[1.0]), wv(&[1.0, 2.0])]).unwrap_err(),
            AggError::LayoutMismatch(1, 2)
        );
    }

    #[test]
    fn weighted_mean_matches_hand_value() {
        let got = fedavg_weighted(&[wv(&[0.0]), wv(&[4.0])], &[1.0, 3.0]).unwrap();
        assert_eq!(got, wv(&[3.0]));
    }

    #[test]
    fn weighted_equal_weights_is_fedavg() {
        let ws = random_set(5, 6, 2);
        let a = fedavg(&ws).unwrap();
        let b = fedavg_weighted(&ws, &[2.0; 5]).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_rejects_bad_coefficients() {
        let ws = random_set(2, 3, 3);
        assert_eq!(
            fedavg_weighted(&ws, &[0.0, 0.0]).unwrap_err(),
            AggError::BadWeights
        );
        assert_eq!(
            fedavg_weighted(&ws, &[1.0, -1.0]).unwrap_err(),
            AggError::BadWeights
        );
    }

    #[test]
    fn median_odd_picks_middle() {
        let got = coordinate_median(&[wv(&[0.0]), wv(&[10.0]), wv(&[1.0])]).unwrap();
        assert_eq!(got, wv(&[1.0]));
    }

    #[test]
    fn median_single_is_identity() {
        let v = wv(&[3.0, -7.0]);
        assert_eq!(coordinate_median(std::slice::from_ref(&v)).unwrap(), v);
    }

    #[test]
    fn median_even_averages_middles() {
        let got =
            coordinate_median(&[wv(&[0.0]), wv(&[1.0]), wv(&[9.0]), wv(&[100.0])]).unwrap();
        assert_eq!(got, wv(&[5.0]));
    }

    #[test]
    fn median_matches_sort_oracle() {
        let ws = random_set(9, 13, 4);
        let got = coordinate_median(&ws).unwrap();
        for i in 0..13 {
            let mut col: Vec<f64> = ws.iter().map(|w| w.values[i]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            assert_eq!(got.values[i], col[4]);
        }
    }

    #[test]
    fn trimmed_mean_zero_is_fedavg() {
        let ws = random_set(6, 4, 5);
        assert_eq!(trimmed_mean(&ws, 0).unwrap(), fedavg(&ws).unwrap());
    }

    #[test]
    fn trimmed_mean_drops_extremes() {
        let got = trimmed_mean(&[wv(&[0.0]), wv(&[1.0]), wv(&[100.0])], 1).unwrap();
        assert_eq!(got, wv(&[1.0]));
    }

    #[test]
    fn trimmed_mean_matches_sort_and_slice_oracle() {
        let ws = random_set(8, 5, 6);
        let got = trimmed_mean(&ws, 2).unwrap();
        for i in 0..5 {
            let mut col: Vec<f64> = ws.iter().map(|w| w.values[i]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            let mean = col[2..6].iter().sum::<f64>() / 4.0;
            assert!((got.values[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn trimmed_mean_rejects_overtrim() {
        let ws = random_set(4, 2, 7);
        assert_eq!(
            trimmed_mean(&ws, 2).unwrap_err(),
            AggError::TrimTooLarge { trim_k: 2, n: 4 }
        );
    }

    #[test]
    fn krum_identical_vectors_tie_break_to_first() {
        let v = wv(&[1.0, 2.0]);
        let ws = vec![v.clone(); 5];
        assert_eq!(krum_index(&ws, 1).unwrap(), 0);
        assert_eq!(krum(&ws, 1).unwrap(), v);
    }

    #[test]
    fn krum_never_picks_far_outlier() {
        for seed in 0..10 {
            let mut r = stream(seed, Purpose::Init, &[8]);
            let mut ws: Vec<WeightVector> = (0..5)
                .map(|_| {
                    WeightVector::from_values(
                        (0..4).map(|_| r.random_range(-0.1..0.1)).collect(),
                    )
                })
                .collect();
            ws.push(wv(&[1e3, -1e3, 1e3, -1e3]));
            let idx = krum_index(&ws, 1).unwrap();
            assert!(idx < 5, "seed {seed} picked the outlier");
        }
    }

    #[test]
    fn krum_scores_match_pairwise_brute_force() {
        let ws = random_set(5, 3, 9);
        let scores = krum_scores(&ws, 1).unwrap();
        // n=5, f=1: keep the 2 nearest of the 4 distances
        for i in 0..5 {
            let mut d: Vec<f64> = (0..5)
                .filter(|&j| j != i)
                .map(|j| {
                    ws[i].values
                        .iter()
                        .zip(&ws[j].values)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            let expect = d[0] + d[1];
            assert!((scores[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn krum_rejects_small_cohort() {
        let ws = random_set(4, 2, 10);
        assert_eq!(
            krum(&ws, 1).unwrap_err(),
            AggError::TooFewForKrum { f: 1, min: 5, n: 4 }
        );
    }

    #[test]
    fn select_best_single_candidate() {
        let v = wv(&[9.0]);
        assert_eq!(select_best(&[(v.clone(), 0.1)]).unwrap(), v);
    }

    #[test]
    fn select_best_prefers_higher_score() {
        let a = wv(&[1.0]);
        let b = wv(&[2.0]);
        let got = select_best(&[(a, 1.0), (b.clone(), 4.95)]).unwrap();
        assert_eq!(got, b);
    }

    #[test]
    fn select_best_matches_scan_oracle() {
        let mut r = stream(3, Purpose::Eval, &[]);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..8).map(|_| r.random_range(0.0..10.0)).collect();
            let mut oracle = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[oracle] {
                    oracle = i;
                }
            }
            assert_eq!(select_best_index(&scores), Some(oracle));
        }
    }

    #[test]
    fn select_best_ties_to_lowest_index() {
        assert_eq!(select_best_index(&[2.0, 2.0, 1.0]), Some(0));
        assert_eq!(select_best_index(&[]), None);
    }

    #[test]
    fn kind_dispatch_and_serde() {
        let ws = random_set(5, 3, 11);
        assert_eq!(AggregatorKind::Fedavg.apply(&ws).unwrap(), fedavg(&ws).unwrap());
        assert_eq!(
            AggregatorKind::TrimmedMean { trim_k: 1 }.apply(&ws).unwrap(),
            trimmed_mean(&ws, 1).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&AggregatorKind::Fedavg).unwrap(),
            "\"fedavg\""
        );
        let k: AggregatorKind = serde_json::from_str("{\"krum\":{\"f\":1}}").unwrap();
        assert_eq!(k, AggregatorKind::Krum { f: 1 });
    }
}
