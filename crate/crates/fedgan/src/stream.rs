//! Seed derivation for deterministic, schedule-independent randomness.
//!
//! Every random draw in a run comes from a ChaCha8 stream whose seed is
//! derived by hashing the run seed together with the identity of the
//! consumer (client id, FLU id, round, purpose). Workers can then train
//! replicas in any order, on any number of threads, without perturbing
//! the randomness any other replica sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. Keeps streams for different
/// purposes disjoint even when the rest of the tags collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Weight initialization.
    Init,
    /// Batch selection from a client shard.
    Batch,
    /// Generator input noise during training.
    Noise,
    /// Noise used for metric evaluation samples.
    Eval,
    /// Random weights drawn by a poisoning client.
    Poison,
    /// Dataset construction (mixture sampling, subsampling, partitioning).
    Data,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x11,
            Purpose::Batch => 0x22,
            Purpose::Noise => 0x33,
            Purpose::Eval => 0x44,
            Purpose::Poison => 0x55,
            Purpose::Data => 0x66,
        }
    }
}

// splitmix64; chosen over std's hasher because its output is stable
// across Rust releases and platforms.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with an ordered list of tags into a single seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0xA076_1D64_78BD_642F);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    h
}

/// ChaCha8 stream for `(root, purpose, tags...)`.
pub fn stream(root: u64, purpose: Purpose, tags: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(tags.len() + 1);
    all.push(purpose.tag());
    all.extend_from_slice(tags);
    ChaCha8Rng::seed_from_u64(derive_seed(root, &all))
}
