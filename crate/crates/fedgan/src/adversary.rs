//! Malicious client behaviours and their schedule.
//!
//! Two attacks are modelled. A free rider skips local training and
//! returns the replica exactly as it received it, then uses the shared
//! generator to extract samples of data it never contributed. A poisoner
//! replaces every weight with random draws, trying to destroy the
//! aggregate. Both switch on at a configured round, so a run can compare
//! clean and attacked phases.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{sample_generator, NetSpec, NnError, WeightVector};
use crate::stream::{stream, Purpose};
use crate::topology::GanPair;

/// Errors from attack configuration.
#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("malicious client {client} is outside 0..{n_clients}")]
    UnknownClient { client: usize, n_clients: usize },
    #[error("poison std must be nonnegative, got {0}")]
    BadPoisonStd(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which behaviour the malicious clients follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    FreeRider,
    Poison,
}

/// One attack campaign: who misbehaves, how, and from which round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub malicious_clients: BTreeSet<usize>,
    /// (mean, std) of the random weights a poisoner submits.
    #[serde(default = "default_poison_dist")]
    pub poison_dist: (f64, f64),
    /// First round (1-based) in which the attack is live.
    #[serde(default = "default_start_round")]
    pub start_round: usize,
}

fn default_poison_dist() -> (f64, f64) {
    (0.0, 1.0)
}

fn default_start_round() -> usize {
    1
}

impl AttackSpec {
    /// Checks client ids against the federation size. Logs a warning if
    /// the malicious clients are not a minority, since every robustness
    /// guarantee assumes they are.
    pub fn validate(&self, n_clients: usize) -> Result<(), AttackError> {
        for &client in &self.malicious_clients {
            if client >= n_clients {
                return Err(AttackError::UnknownClient { client, n_clients });
            }
        }
        if self.poison_dist.1.is_nan() || self.poison_dist.1 < 0.0 {
            return Err(AttackError::BadPoisonStd(self.poison_dist.1));
        }
        if 2 * self.malicious_clients.len() >= n_clients {
            log::warn!(
                "{} of {} clients are malicious; robust aggregation assumes a minority",
                self.malicious_clients.len(),
                n_clients
            );
        }
        Ok(())
    }

    /// Whether the attack has started by `round` (1-based).
    pub fn is_active(&self, round: usize) -> bool {
        round >= self.start_round
    }

    /// Whether `client` is one of the attackers.
    pub fn applies_to(&self, client: usize) -> bool {
        self.malicious_clients.contains(&client)
    }
}

/// The free rider's "update": the replica exactly as it arrived.
pub fn free_rider_update(replica: &GanPair) -> GanPair {
    replica.clone()
}

/// Replaces every generator and discriminator weight with an independent
/// draw from N(mean, std).
pub fn poison_update(replica: &GanPair, poison_dist: (f64, f64), rng: &mut impl Rng) -> GanPair {
    let (mean, std) = poison_dist;
    let normal = Normal::new(mean, std).expect("validated std");
    let draw = |w: &WeightVector, rng: &mut dyn rand::RngCore| {
        WeightVector::from_values((0..w.len()).map(|_| normal.sample(rng)).collect())
    };
    GanPair { gen: draw(&replica.gen, rng), disc: draw(&replica.disc, rng) }
}

/// Samples the generator a malicious client holds after a sync step.
/// With the same `seed`, the honest global generator produces identical
/// noise, so leakage can be verified by exact comparison.
pub fn extract_inference_samples(
    gen_spec: &NetSpec,
    leaked_gen: &WeightVector,
    n_samples: usize,
    seed: u64,
) -> Result<Array2<f64>, AttackError> {
    let mut rng = stream(seed, Purpose::Noise, &[]);
    Ok(sample_generator(gen_spec, leaked_gen, n_samples, &mut rng)?)
}
