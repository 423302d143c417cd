//! The MULTI-FLGAN graph: federated learning units and sync servers.
//!
//! A run with `Y` generators and `X` discriminators allocates one
//! federated learning unit (FLU) per (generator, discriminator) pair and
//! one sync server per generator index (G-sync) and per discriminator
//! index (D-sync). A sync server connects to exactly the FLUs that share
//! its index. Sync servers are roles with separate state, not separate
//! processes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{init_params, NetSpec, WeightVector};
use crate::stream::derive_seed;

/// Errors from graph construction and client assignment.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("X and Y must be at least 1, got X={x} Y={y}")]
    BadDimensions { x: usize, y: usize },
    #[error("{0} is outside this topology")]
    OutOfRange(String),
    #[error("client count N must be at least 1")]
    BadClientCount,
}

/// Identifies one federated learning unit by its generator index `g` in
/// `1..=Y` and discriminator index `d` in `1..=X`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FluId {
    pub g: usize,
    pub d: usize,
}

impl fmt::Display for FluId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}D{}", self.g, self.d)
    }
}

/// Which family of networks a sync server aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SyncKind {
    G,
    D,
}

/// Identifies a sync server: `G{i}` holds the shared state of generator
/// `i`, `D{i}` that of discriminator `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SyncId {
    pub kind: SyncKind,
    pub index: usize,
}

impl fmt::Display for SyncId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SyncKind::G => write!(f, "G{}", self.index),
            SyncKind::D => write!(f, "D{}", self.index),
        }
    }
}

/// The connection rule: a sync server serves an FLU iff they share the
/// relevant index.
pub fn connection_rule(s: SyncId, f: FluId) -> bool {
    match s.kind {
        SyncKind::G => s.index == f.g,
        SyncKind::D => s.index == f.d,
    }
}

/// The allocated graph for one run. Immutable after [`allocate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    #[serde(rename = "X")]
    pub x: usize,
    #[serde(rename = "Y")]
    pub y: usize,
    pub flus: Vec<FluId>,
    pub syncs: Vec<SyncId>,
    pub edges: Vec<(SyncId, FluId)>,
}

/// Builds the full graph for `X` discriminators and `Y` generators.
/// FLUs are ordered by (g, d), sync servers list all G servers then all
/// D servers, and edges follow sync order; every traversal of the
/// topology is therefore deterministic.
pub fn allocate(x: usize, y: usize) -> Result<Topology, TopologyError> {
    if x < 1 || y < 1 {
        return Err(TopologyError::BadDimensions { x, y });
    }
    let mut flus = Vec::with_capacity(x * y);
    for g in 1..=y {
        for d in 1..=x {
            flus.push(FluId { g, d });
        }
    }
    let mut syncs = Vec::with_capacity(x + y);
    for index in 1..=y {
        syncs.push(SyncId { kind: SyncKind::G, index });
    }
    for index in 1..=x {
        syncs.push(SyncId { kind: SyncKind::D, index });
    }
    let mut edges = Vec::new();
    for &s in &syncs {
        for &f in &flus {
            if connection_rule(s, f) {
                edges.push((s, f));
            }
        }
    }
    Ok(Topology { x, y, flus, syncs, edges })
}

impl Topology {
    fn check_sync(&self, s: SyncId) -> Result<(), TopologyError> {
        let limit = match s.kind {
            SyncKind::G => self.y,
            SyncKind::D => self.x,
        };
        if s.index < 1 || s.index > limit {
            return Err(TopologyError::OutOfRange(s.to_string()));
        }
        Ok(())
    }

    fn check_flu(&self, f: FluId) -> Result<(), TopologyError> {
        if f.g < 1 || f.g > self.y || f.d < 1 || f.d > self.x {
            return Err(TopologyError::OutOfRange(f.to_string()));
        }
        Ok(())
    }

    /// Whether sync server `s` serves FLU `f`. Errors when either id is
    /// outside this topology.
    pub fn is_connected(&self, s: SyncId, f: FluId) -> Result<bool, TopologyError> {
        self.check_sync(s)?;
        self.check_flu(f)?;
        Ok(connection_rule(s, f))
    }

    /// FLUs served by `s`, in (g, d) order.
    pub fn connected_flus(&self, s: SyncId) -> Result<Vec<FluId>, TopologyError> {
        self.check_sync(s)?;
        Ok(self
            .flus
            .iter()
            .copied()
            .filter(|&f| connection_rule(s, f))
            .collect())
    }

    /// The (G-sync, D-sync) pair serving FLU `f`.
    pub fn syncs_of(&self, f: FluId) -> Result<(SyncId, SyncId), TopologyError> {
        self.check_flu(f)?;
        Ok((
            SyncId { kind: SyncKind::G, index: f.g },
            SyncId { kind: SyncKind::D, index: f.d },
        ))
    }

    /// Pretty JSON dump of ids and edges for debugging and reports.
    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }
}

/// One generator/discriminator pair of flat weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanPair {
    pub gen: WeightVector,
    pub disc: WeightVector,
}

impl GanPair {
    /// Fresh weights for one FLU. Each FLU derives its own init seed from
    /// the run seed and its (g, d) id, so different FLUs start from
    /// different weights while remaining reproducible.
    pub fn init(gen_spec: &NetSpec, disc_spec: &NetSpec, root_seed: u64, flu: FluId) -> GanPair {
        GanPair {
            gen: init_params(gen_spec, derive_seed(root_seed, &[flu.g as u64, flu.d as u64, 0])),
            disc: init_params(disc_spec, derive_seed(root_seed, &[flu.g as u64, flu.d as u64, 1])),
        }
    }
}

/// Per-FLU replica slots: every FLU holds one identical replica per
/// client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAssignment {
    pub n_clients: usize,
    pub replicas: BTreeMap<FluId, Vec<GanPair>>,
}

/// Creates the replica slots for all FLUs of `t`. Within an FLU all `n`
/// replicas start bit-identical; across FLUs the initial weights differ.
pub fn assign_clients(
    t: &Topology,
    n: usize,
    gen_spec: &NetSpec,
    disc_spec: &NetSpec,
    init_seed: u64,
) -> Result<ClientAssignment, TopologyError> {
    if n < 1 {
        return Err(TopologyError::BadClientCount);
    }
    let mut replicas = BTreeMap::new();
    for &flu in &t.flus {
        let pair = GanPair::init(gen_spec, disc_spec, init_seed, flu);
        replicas.insert(flu, vec![pair; n]);
    }
    Ok(ClientAssignment { n_clients: n, replicas })
}
