//! The per-round protocol engine.
//!
//! One round of the all-vs-all architecture has four phases. Sync: every
//! sync server pushes its model into its connected federated learning
//! units (FLUs), and each FLU hands identical replicas to every client.
//! Train: each client takes `local_steps` discriminator and generator
//! steps on every replica it holds. Update FLU: each FLU collapses its
//! clients' replicas with the configured aggregation rule. Update sync:
//! each G-sync server averages the generator parts of its connected
//! FLUs, each D-sync server the discriminator parts. After the last
//! round, termination picks the best G-sync generator by proxy inception
//! score.
//!
//! The two baselines run a single shared model: the classic baseline
//! averages both networks every round; the generator-only variant keeps
//! every discriminator local to its client forever. The baselines are a
//! separate code path from the all-vs-all engine on purpose, so their
//! equivalence at X=Y=1 is a meaningful cross-check of both.
//!
//! Determinism contract: every random draw comes from a stream keyed by
//! (run seed, purpose, client, FLU, round), and every reduction runs in
//! a fixed order, so results are independent of worker scheduling. At
//! every metric round all live weights are rounded to f32 before scoring
//! and checkpointing, which makes a resumed run bit-identical to an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{free_rider_update, poison_update, AttackError, AttackKind, AttackSpec};
use crate::aggregation::{fedavg, select_best_index, AggError, AggregatorKind};
use crate::data::{next_batch, BatchStream, DataConfig, DataError, LabeledSet};
use crate::metrics::{MetricError, MetricReport, Scorer};
use crate::nn::{
    disc_loss_and_grad, gen_loss_and_grad, noise_matrix, sample_generator, sgd_step, GenLossKind,
    NetSpec, NnError, OptimizerState, OutputActivation, WeightVector,
};
use crate::stream::{stream, Purpose};
use crate::topology::{allocate, assign_clients, FluId, GanPair, SyncId, SyncKind, Topology, TopologyError};

/// Errors from configuration validation and round execution.
#[derive(Debug, Error)]
pub enum OrchError {
    #[error("invalid config field {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("non-finite weights at round {round} in {context}")]
    NonFinite { round: usize, context: String },
    #[error("no alive G-sync server to terminate on")]
    NoAliveGsync,
    #[error("fault target {0} does not exist")]
    UnknownFaultTarget(String),
    #[error("expected {expected} shards, got {got}")]
    ShardMismatch { expected: usize, got: usize },
    #[error("resume state does not match the configured architecture")]
    ResumeArchMismatch,
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Aggregation(#[from] AggError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Which training architecture a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "MULTI_FLGAN")]
    MultiFlgan,
    #[serde(rename = "FLGAN")]
    Flgan,
    #[serde(rename = "AFLGAN")]
    Aflgan,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::MultiFlgan => write!(f, "MULTI_FLGAN"),
            Arch::Flgan => write!(f, "FLGAN"),
            Arch::Aflgan => write!(f, "AFLGAN"),
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MULTI_FLGAN" => Ok(Arch::MultiFlgan),
            "FLGAN" => Ok(Arch::Flgan),
            "AFLGAN" => Ok(Arch::Aflgan),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

/// What a fault event hits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Flu(FluId),
    Sync(SyncId),
    Client(usize),
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Flu(id) => write!(f, "FLU {id}"),
            FaultTarget::Sync(id) => write!(f, "sync {id}"),
            FaultTarget::Client(i) => write!(f, "client {i}"),
        }
    }
}

/// The only fault kind modelled: the target goes silent and stays dead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    #[default]
    Drop,
}

/// Drops one node at the start of the given round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub at_round: usize,
    pub target: FaultTarget,
    #[serde(default)]
    pub kind: FaultKind,
}

fn default_epochs() -> usize {
    100
}

fn default_alpha() -> f64 {
    2e-4
}

fn default_true() -> bool {
    true
}

fn default_lr_cap() -> Option<f64> {
    Some(0.05)
}

fn default_weight_decay() -> f64 {
    1.5e-8
}

fn default_batch() -> usize {
    crate::data::DEFAULT_BATCH_SIZE
}

fn default_z_dim() -> usize {
    8
}

fn default_metric_every() -> usize {
    10
}

fn default_local_steps() -> usize {
    1
}

fn default_one() -> usize {
    1
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

/// Full description of one run. Unknown JSON keys are rejected; every
/// field except `arch`, `N` and `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    /// Number of discriminators. Baselines always run as 1.
    #[serde(rename = "X", default = "default_one")]
    pub x: usize,
    /// Number of generators. Baselines always run as 1.
    #[serde(rename = "Y", default = "default_one")]
    pub y: usize,
    /// Number of clients.
    #[serde(rename = "N")]
    pub n_clients: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Base learning rate.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Scale the learning rate by the client count.
    #[serde(default = "default_true")]
    pub lr_scaling: bool,
    /// Ceiling on the scaled learning rate; `null` disables the cap.
    #[serde(default = "default_lr_cap")]
    pub lr_cap: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub aggregator: AggregatorKind,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Generator noise dimension.
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    /// Metrics and checkpoints happen every this many rounds.
    #[serde(default = "default_metric_every")]
    pub metric_every: usize,
    /// Discriminator+generator step pairs per replica per round.
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default)]
    pub gen_loss: GenLossKind,
    #[serde(default = "default_hidden")]
    pub gen_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub disc_hidden: Vec<usize>,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    /// Discriminator count actually used: baselines are forced to 1.
    pub fn effective_x(&self) -> usize {
        match self.arch {
            Arch::MultiFlgan => self.x,
            _ => 1,
        }
    }

    /// Generator count actually used: baselines are forced to 1.
    pub fn effective_y(&self) -> usize {
        match self.arch {
            Arch::MultiFlgan => self.y,
            _ => 1,
        }
    }

    /// The learning rate each local step uses: `alpha * N` when scaling
    /// is on, clamped at `lr_cap` when one is set.
    pub fn effective_lr(&self) -> f64 {
        if self.lr_scaling {
            let scaled = self.alpha * self.n_clients as f64;
            match self.lr_cap {
                Some(cap) => scaled.min(cap),
                None => scaled,
            }
        } else {
            self.alpha
        }
    }

    /// Generator shape for `data_dim`-dimensional samples.
    pub fn gen_spec(&self, data_dim: usize) -> Result<NetSpec, OrchError> {
        let mut sizes = vec![self.z_dim];
        sizes.extend_from_slice(&self.gen_hidden);
        sizes.push(data_dim);
        Ok(NetSpec::new(sizes, OutputActivation::Tanh)?)
    }

    /// Discriminator shape for `data_dim`-dimensional samples.
    pub fn disc_spec(&self, data_dim: usize) -> Result<NetSpec, OrchError> {
        let mut sizes = vec![data_dim];
        sizes.extend_from_slice(&self.disc_hidden);
        sizes.push(1);
        Ok(NetSpec::new(sizes, OutputActivation::Sigmoid)?)
    }

    /// Stable identifier used in file names and result rows.
    pub fn run_id(&self) -> String {
        format!(
            "{}-N{}-X{}-Y{}-s{}",
            self.arch,
            self.n_clients,
            self.effective_x(),
            self.effective_y(),
            self.seed
        )
    }

    /// Checks every invariant; error messages name the offending field.
    pub fn validate(&self) -> Result<(), OrchError> {
        let bad = |field: &'static str, message: String| {
            Err(OrchError::InvalidConfig { field, message })
        };
        if self.x < 1 {
            return bad("X", format!("must be at least 1, got {}", self.x));
        }
        if self.y < 1 {
            return bad("Y", format!("must be at least 1, got {}", self.y));
        }
        if self.n_clients < 1 {
            return bad("N", format!("must be at least 1, got {}", self.n_clients));
        }
        if self.epochs < 1 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.metric_every < 1 {
            return bad("metric_every", "must be at least 1".into());
        }
        if self.batch < 1 {
            return bad("batch", "must be at least 1".into());
        }
        if self.z_dim < 1 {
            return bad("z_dim", "must be at least 1".into());
        }
        if self.local_steps < 1 {
            return bad("local_steps", "must be at least 1".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad("alpha", format!("must be finite and nonnegative, got {}", self.alpha));
        }
        if let Some(cap) = self.lr_cap {
            if cap.is_nan() || cap <= 0.0 {
                return bad("lr_cap", format!("must be positive, got {cap}"));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", format!("must be nonnegative, got {}", self.weight_decay));
        }
        if self.gen_hidden.iter().any(|&h| h < 1) {
            return bad("gen_hidden", "layer sizes must be at least 1".into());
        }
        if self.disc_hidden.iter().any(|&h| h < 1) {
            return bad("disc_hidden", "layer sizes must be at least 1".into());
        }
        match self.aggregator {
            AggregatorKind::Krum { f } => {
                if self.n_clients < 2 * f + 3 {
                    return bad(
                        "aggregator",
                        format!("krum with f={f} needs N >= {}, got {}", 2 * f + 3, self.n_clients),
                    );
                }
            }
            AggregatorKind::TrimmedMean { trim_k }
                if 2 * trim_k >= self.n_clients => {
                    return bad(
                        "aggregator",
                        format!("trimmed_mean with trim_k={trim_k} needs N > {}", 2 * trim_k),
                    );
                }
            _ => {}
        }
        if let Some(attack) = &self.attack {
            attack
                .validate(self.n_clients)
                .map_err(|e| OrchError::InvalidConfig { field: "attack", message: e.to_string() })?;
        }
        let (ex, ey) = (self.effective_x(), self.effective_y());
        for fault in &self.faults {
            let ok = match fault.target {
                FaultTarget::Flu(f) => (1..=ey).contains(&f.g) && (1..=ex).contains(&f.d),
                FaultTarget::Sync(s) => match s.kind {
                    SyncKind::G => (1..=ey).contains(&s.index),
                    SyncKind::D => (1..=ex).contains(&s.index),
                },
                FaultTarget::Client(c) => c < self.n_clients,
            };
            if !ok {
                return bad("faults", format!("target {} does not exist", fault.target));
            }
            if fault.at_round < 1 {
                return bad("faults", "at_round must be at least 1".into());
            }
        }
        if self.data.train_size < self.n_clients {
            return bad(
                "data.train_size",
                format!("must cover all {} clients, got {}", self.n_clients, self.data.train_size),
            );
        }
        if self.data.pool_size < self.data.train_size {
            return bad("data.pool_size", "must be at least train_size".into());
        }
        if self.data.eval_samples < 2 {
            return bad("data.eval_samples", "must be at least 2".into());
        }
        Ok(())
    }
}

/// Full mutable state of an all-vs-all run between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: usize,
    /// G-sync servers hold generator weights, D-sync servers hold
    /// discriminator weights.
    pub sync_models: BTreeMap<SyncId, WeightVector>,
    pub flu_models: BTreeMap<FluId, GanPair>,
    /// One replica per (FLU, client).
    pub replicas: BTreeMap<FluId, Vec<GanPair>>,
    pub alive_flus: BTreeMap<FluId, bool>,
    pub alive_syncs: BTreeMap<SyncId, bool>,
    pub alive_clients: Vec<bool>,
}

impl RoundState {
    /// Rounds every weight to f32 precision, the checkpoint barrier.
    pub fn snap_to_f32(&mut self) {
        for w in self.sync_models.values_mut() {
            w.round_to_f32();
        }
        for pair in self.flu_models.values_mut() {
            pair.gen.round_to_f32();
            pair.disc.round_to_f32();
        }
        for replicas in self.replicas.values_mut() {
            for pair in replicas {
                pair.gen.round_to_f32();
                pair.disc.round_to_f32();
            }
        }
    }

    /// Alive G-sync ids in index order.
    pub fn alive_gsyncs(&self) -> Vec<SyncId> {
        self.alive_syncs
            .iter()
            .filter(|(s, &alive)| alive && s.kind == SyncKind::G)
            .map(|(&s, _)| s)
            .collect()
    }
}

/// Full mutable state of a baseline run between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub round: usize,
    pub global: GanPair,
    pub clients: Vec<GanPair>,
    pub alive_clients: Vec<bool>,
}

impl BaselineState {
    pub fn snap_to_f32(&mut self) {
        self.global.gen.round_to_f32();
        self.global.disc.round_to_f32();
        for pair in &mut self.clients {
            pair.gen.round_to_f32();
            pair.disc.round_to_f32();
        }
    }
}

/// State of either architecture, for checkpointing and resuming.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchState {
    Multi(RoundState),
    Baseline(BaselineState),
}

impl ArchState {
    pub fn round(&self) -> usize {
        match self {
            ArchState::Multi(s) => s.round,
            ArchState::Baseline(s) => s.round,
        }
    }
}

/// What a finished run hands back: one metric report per metric round,
/// and the terminated best generator with its score.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricReport>,
    pub best_generator: WeightVector,
    pub best_score: f64,
    pub final_state: ArchState,
}

fn check_finite(w: &WeightVector, round: usize, context: impl Fn() -> String) -> Result<(), OrchError> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(OrchError::NonFinite { round, context: context() })
    }
}

/// Turns a non-finite failure inside local training into the round
/// guard error; everything else stays a plain network error.
fn lift_nonfinite(e: NnError, round: usize, context: impl Fn() -> String) -> OrchError {
    match e {
        NnError::NonFinite(_) => OrchError::NonFinite { round, context: context() },
        other => OrchError::Nn(other),
    }
}

/// One client's local work on one replica: `local_steps` alternating
/// discriminator and generator steps, or the configured attack instead.
#[allow(clippy::too_many_arguments)]
fn client_update(
    config: &RunConfig,
    gen_spec: &NetSpec,
    disc_spec: &NetSpec,
    start: &GanPair,
    shard: &LabeledSet,
    client: usize,
    flu: FluId,
    round: usize,
) -> Result<GanPair, OrchError> {
    if let Some(attack) = &config.attack {
        if attack.is_active(round) && attack.applies_to(client) {
            return Ok(match attack.kind {
                AttackKind::FreeRider => free_rider_update(start),
                AttackKind::Poison => {
                    let mut rng = stream(
                        config.seed,
                        Purpose::Poison,
                        &[client as u64, flu.g as u64, flu.d as u64, round as u64],
                    );
                    poison_update(start, attack.poison_dist, &mut rng)
                }
            });
        }
    }
    let tags = [client as u64, flu.g as u64, flu.d as u64, round as u64];
    let mut batches = BatchStream::new(shard.len(), stream(config.seed, Purpose::Batch, &tags));
    let mut noise_rng = stream(config.seed, Purpose::Noise, &tags);
    let lr = config.effective_lr();
    let mut opt_disc = OptimizerState::new(lr, config.weight_decay)?;
    let mut opt_gen = OptimizerState::new(lr, config.weight_decay)?;
    let context = || format!("client {client} training on FLU {flu}");
    let mut pair = start.clone();
    for _ in 0..config.local_steps {
        let real = next_batch(shard, config.batch, &mut batches);
        let fake = sample_generator(gen_spec, &pair.gen, config.batch, &mut noise_rng)
            .map_err(|e| lift_nonfinite(e, round, context))?;
        let (_, grad_d) = disc_loss_and_grad(disc_spec, &pair.disc, &real, &fake)
            .map_err(|e| lift_nonfinite(e, round, context))?;
        pair.disc = sgd_step(&pair.disc, &grad_d, &mut opt_disc)
            .map_err(|e| lift_nonfinite(e, round, context))?;
        let noise = noise_matrix(config.batch, config.z_dim, &mut noise_rng);
        let (_, grad_g) = gen_loss_and_grad(
            gen_spec,
            disc_spec,
            &pair.gen,
            &pair.disc,
            &noise,
            config.gen_loss,
        )
        .map_err(|e| lift_nonfinite(e, round, context))?;
        pair.gen = sgd_step(&pair.gen, &grad_g, &mut opt_gen)
            .map_err(|e| lift_nonfinite(e, round, context))?;
    }
    Ok(pair)
}

/// Driver for one all-vs-all run; exposes the individual protocol phases
/// so tests can inspect state between them.
pub struct MultiRun<'a> {
    pub config: &'a RunConfig,
    pub topology: Topology,
    pub gen_spec: NetSpec,
    pub disc_spec: NetSpec,
    shards: &'a [LabeledSet],
    pub state: RoundState,
}

impl<'a> MultiRun<'a> {
    /// Allocates the graph, creates per-FLU inits, and bootstraps sync
    /// servers from the average of their connected FLUs' initial models.
    pub fn new(config: &'a RunConfig, shards: &'a [LabeledSet]) -> Result<MultiRun<'a>, OrchError> {
        let data_dim = shards.first().map_or(2, |s| s.dim());
        let gen_spec = config.gen_spec(data_dim)?;
        let disc_spec = config.disc_spec(data_dim)?;
        let topology = allocate(config.effective_x(), config.effective_y())?;
        let assignment =
            assign_clients(&topology, config.n_clients, &gen_spec, &disc_spec, config.seed)?;
        let flu_models: BTreeMap<FluId, GanPair> = assignment
            .replicas
            .iter()
            .map(|(&f, reps)| (f, reps[0].clone()))
            .collect();
        let mut sync_models = BTreeMap::new();
        for &s in &topology.syncs {
            let parts: Vec<WeightVector> = topology
                .connected_flus(s)?
                .into_iter()
                .map(|f| match s.kind {
                    SyncKind::G => flu_models[&f].gen.clone(),
                    SyncKind::D => flu_models[&f].disc.clone(),
                })
                .collect();
            sync_models.insert(s, fedavg(&parts)?);
        }
        let state = RoundState {
            round: 0,
            sync_models,
            alive_flus: topology.flus.iter().map(|&f| (f, true)).collect(),
            alive_syncs: topology.syncs.iter().map(|&s| (s, true)).collect(),
            alive_clients: vec![true; config.n_clients],
            replicas: assignment.replicas,
            flu_models,
        };
        Ok(MultiRun { config, topology, gen_spec, disc_spec, shards, state })
    }

    /// Continues from a checkpointed state.
    pub fn resume(
        config: &'a RunConfig,
        shards: &'a [LabeledSet],
        state: RoundState,
    ) -> Result<MultiRun<'a>, OrchError> {
        let mut run = MultiRun::new(config, shards)?;
        run.state = state;
        Ok(run)
    }

    /// Marks targets of this round's fault events dead.
    pub fn apply_faults(&mut self, round: usize) -> Result<(), OrchError> {
        for event in &self.config.faults {
            if event.at_round == round {
                inject_fault(&mut self.state, event)?;
            }
        }
        Ok(())
    }

    /// Sync phase: alive sync models overwrite the matching part of each
    /// alive FLU's model, then each alive FLU re-seeds all its replicas.
    pub fn sync_step(&mut self) {
        for (&flu, pair) in self.state.flu_models.iter_mut() {
            if !self.state.alive_flus[&flu] {
                continue;
            }
            let g_sync = SyncId { kind: SyncKind::G, index: flu.g };
            let d_sync = SyncId { kind: SyncKind::D, index: flu.d };
            if self.state.alive_syncs[&g_sync] {
                pair.gen = self.state.sync_models[&g_sync].clone();
            }
            if self.state.alive_syncs[&d_sync] {
                pair.disc = self.state.sync_models[&d_sync].clone();
            }
        }
        for (&flu, replicas) in self.state.replicas.iter_mut() {
            if !self.state.alive_flus[&flu] {
                continue;
            }
            let model = &self.state.flu_models[&flu];
            for replica in replicas.iter_mut() {
                *replica = model.clone();
            }
        }
    }

    /// Training phase: every (alive FLU, alive client) replica trains in
    /// parallel; attacked clients follow their attack instead.
    pub fn train_flu_step(&mut self, round: usize) -> Result<(), OrchError> {
        let mut work: Vec<(FluId, usize)> = Vec::new();
        for &flu in &self.topology.flus {
            if !self.state.alive_flus[&flu] {
                continue;
            }
            for client in 0..self.config.n_clients {
                if self.state.alive_clients[client] {
                    work.push((flu, client));
                }
            }
        }
        let results: Vec<((FluId, usize), GanPair)> = work
            .into_par_iter()
            .map(|(flu, client)| {
                let start = &self.state.replicas[&flu][client];
                client_update(
                    self.config,
                    &self.gen_spec,
                    &self.disc_spec,
                    start,
                    &self.shards[client],
                    client,
                    flu,
                    round,
                )
                .map(|pair| ((flu, client), pair))
            })
            .collect::<Result<_, _>>()?;
        for ((flu, client), pair) in results {
            self.state.replicas.get_mut(&flu).expect("flu exists")[client] = pair;
        }
        Ok(())
    }

    /// FLU update phase: each alive FLU aggregates its alive clients'
    /// replicas with the configured rule. An FLU with no alive clients
    /// keeps its previous model.
    pub fn update_flu_step(&mut self, round: usize) -> Result<(), OrchError> {
        for &flu in &self.topology.flus {
            if !self.state.alive_flus[&flu] {
                continue;
            }
            let replicas = &self.state.replicas[&flu];
            let gens: Vec<WeightVector> = (0..self.config.n_clients)
                .filter(|&c| self.state.alive_clients[c])
                .map(|c| replicas[c].gen.clone())
                .collect();
            if gens.is_empty() {
                log::warn!("FLU {flu} has no alive clients at round {round}; keeping its model");
                continue;
            }
            let discs: Vec<WeightVector> = (0..self.config.n_clients)
                .filter(|&c| self.state.alive_clients[c])
                .map(|c| replicas[c].disc.clone())
                .collect();
            let gen = self.config.aggregator.apply(&gens)?;
            let disc = self.config.aggregator.apply(&discs)?;
            check_finite(&gen, round, || format!("FLU {flu} generator aggregate"))?;
            check_finite(&disc, round, || format!("FLU {flu} discriminator aggregate"))?;
            self.state.flu_models.insert(flu, GanPair { gen, disc });
        }
        Ok(())
    }

    /// Sync update phase: each alive sync server becomes the plain mean
    /// of its part over its alive connected FLUs; a sync with no alive
    /// FLUs keeps its previous model.
    pub fn update_sync_step(&mut self, round: usize) -> Result<(), OrchError> {
        for &s in &self.topology.syncs {
            if !self.state.alive_syncs[&s] {
                continue;
            }
            let parts: Vec<WeightVector> = self
                .topology
                .connected_flus(s)?
                .into_iter()
                .filter(|f| self.state.alive_flus[f])
                .map(|f| match s.kind {
                    SyncKind::G => self.state.flu_models[&f].gen.clone(),
                    SyncKind::D => self.state.flu_models[&f].disc.clone(),
                })
                .collect();
            if parts.is_empty() {
                log::warn!("sync {s} has no alive FLUs at round {round}; keeping its model");
                continue;
            }
            let mean = fedavg(&parts)?;
            check_finite(&mean, round, || format!("sync {s} aggregate"))?;
            self.state.sync_models.insert(s, mean);
        }
        Ok(())
    }

    /// Runs one full round: faults, sync, train, FLU update, sync update.
    pub fn round(&mut self, round: usize) -> Result<(), OrchError> {
        self.apply_faults(round)?;
        self.sync_step();
        self.train_flu_step(round)?;
        self.update_flu_step(round)?;
        self.update_sync_step(round)?;
        self.state.round = round;
        Ok(())
    }

    /// Termination: scores every alive G-sync generator and returns the
    /// best one (ties to the lowest generator index).
    pub fn terminate(
        &self,
        mut metric_fn: impl FnMut(SyncId, &WeightVector) -> Result<f64, OrchError>,
    ) -> Result<(WeightVector, f64), OrchError> {
        let candidates = self.state.alive_gsyncs();
        if candidates.is_empty() {
            return Err(OrchError::NoAliveGsync);
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for &s in &candidates {
            scores.push(metric_fn(s, &self.state.sync_models[&s])?);
        }
        let best = select_best_index(&scores).expect("nonempty candidates");
        Ok((self.state.sync_models[&candidates[best]].clone(), scores[best]))
    }
}

/// Marks a fault's target dead. Errors if the target does not exist in
/// this state; re-dropping a dead target is a no-op.
pub fn inject_fault(state: &mut RoundState, event: &FaultEvent) -> Result<(), OrchError> {
    match event.target {
        FaultTarget::Flu(f) => match state.alive_flus.get_mut(&f) {
            Some(alive) => *alive = false,
            None => return Err(OrchError::UnknownFaultTarget(event.target.to_string())),
        },
        FaultTarget::Sync(s) => match state.alive_syncs.get_mut(&s) {
            Some(alive) => *alive = false,
            None => return Err(OrchError::UnknownFaultTarget(event.target.to_string())),
        },
        FaultTarget::Client(c) => match state.alive_clients.get_mut(c) {
            Some(alive) => *alive = false,
            None => return Err(OrchError::UnknownFaultTarget(event.target.to_string())),
        },
    }
    Ok(())
}

/// Whether metrics and checkpoints fire at `round`. The run loops also
/// treat the final round as a metric round, so every run ends with a
/// scored snapshot.
pub fn is_metric_round(round: usize, metric_every: usize) -> bool {
    round >= 1 && round.is_multiple_of(metric_every)
}

/// Driver for the two baselines. One global model; clients train private
/// copies; the server aggregates generators every round and, for the
/// classic baseline only, discriminators too.
pub struct BaselineRun<'a> {
    pub config: &'a RunConfig,
    pub gen_spec: NetSpec,
    pub disc_spec: NetSpec,
    shards: &'a [LabeledSet],
    /// False for the generator-only variant: discriminators then stay
    /// local to their client for the whole run.
    pub aggregate_discs: bool,
    pub state: BaselineState,
}

impl<'a> BaselineRun<'a> {
    /// All clients start from one shared init, derived exactly like the
    /// (g=1, d=1) FLU init so the X=Y=1 all-vs-all run is comparable.
    pub fn new(
        config: &'a RunConfig,
        shards: &'a [LabeledSet],
        aggregate_discs: bool,
    ) -> Result<BaselineRun<'a>, OrchError> {
        let data_dim = shards.first().map_or(2, |s| s.dim());
        let gen_spec = config.gen_spec(data_dim)?;
        let disc_spec = config.disc_spec(data_dim)?;
        let init = GanPair::init(&gen_spec, &disc_spec, config.seed, FluId { g: 1, d: 1 });
        let state = BaselineState {
            round: 0,
            clients: vec![init.clone(); config.n_clients],
            global: init,
            alive_clients: vec![true; config.n_clients],
        };
        Ok(BaselineRun { config, gen_spec, disc_spec, shards, aggregate_discs, state })
    }

    pub fn resume(
        config: &'a RunConfig,
        shards: &'a [LabeledSet],
        aggregate_discs: bool,
        state: BaselineState,
    ) -> Result<BaselineRun<'a>, OrchError> {
        let mut run = BaselineRun::new(config, shards, aggregate_discs)?;
        run.state = state;
        Ok(run)
    }

    pub fn apply_faults(&mut self, round: usize) -> Result<(), OrchError> {
        for event in &self.config.faults {
            if event.at_round == round {
                match event.target {
                    FaultTarget::Client(c) if c < self.state.alive_clients.len() => {
                        self.state.alive_clients[c] = false;
                    }
                    _ => return Err(OrchError::UnknownFaultTarget(event.target.to_string())),
                }
            }
        }
        Ok(())
    }

    /// The server pushes the global model to every alive client: both
    /// networks for the classic baseline, generators only for the
    /// generator-only variant.
    pub fn distribute(&mut self) {
        for (client, pair) in self.state.clients.iter_mut().enumerate() {
            if !self.state.alive_clients[client] {
                continue;
            }
            pair.gen = self.state.global.gen.clone();
            if self.aggregate_discs {
                pair.disc = self.state.global.disc.clone();
            }
        }
    }

    /// Every alive client trains its own model on its own shard, using
    /// the same per-(client, round) streams as an X=Y=1 all-vs-all run.
    pub fn train(&mut self, round: usize) -> Result<(), OrchError> {
        let flu = FluId { g: 1, d: 1 };
        let work: Vec<usize> = (0..self.config.n_clients)
            .filter(|&c| self.state.alive_clients[c])
            .collect();
        let results: Vec<(usize, GanPair)> = work
            .into_par_iter()
            .map(|client| {
                client_update(
                    self.config,
                    &self.gen_spec,
                    &self.disc_spec,
                    &self.state.clients[client],
                    &self.shards[client],
                    client,
                    flu,
                    round,
                )
                .map(|pair| (client, pair))
            })
            .collect::<Result<_, _>>()?;
        for (client, pair) in results {
            self.state.clients[client] = pair;
        }
        Ok(())
    }

    /// Aggregates alive clients' models into the global model.
    pub fn aggregate(&mut self, round: usize) -> Result<(), OrchError> {
        let alive: Vec<usize> = (0..self.config.n_clients)
            .filter(|&c| self.state.alive_clients[c])
            .collect();
        if alive.is_empty() {
            log::warn!("no alive clients at round {round}; keeping the global model");
            return Ok(());
        }
        let gens: Vec<WeightVector> =
            alive.iter().map(|&c| self.state.clients[c].gen.clone()).collect();
        let gen = self.config.aggregator.apply(&gens)?;
        check_finite(&gen, round, || "global generator aggregate".to_string())?;
        self.state.global.gen = gen;
        if self.aggregate_discs {
            let discs: Vec<WeightVector> =
                alive.iter().map(|&c| self.state.clients[c].disc.clone()).collect();
            let disc = self.config.aggregator.apply(&discs)?;
            check_finite(&disc, round, || "global discriminator aggregate".to_string())?;
            self.state.global.disc = disc;
        }
        Ok(())
    }

    /// One full round: faults, distribute, train, aggregate.
    pub fn round(&mut self, round: usize) -> Result<(), OrchError> {
        self.apply_faults(round)?;
        self.distribute();
        self.train(round)?;
        self.aggregate(round)?;
        self.state.round = round;
        Ok(())
    }
}

fn eval_rng(seed: u64, sync_index: usize, round: usize) -> rand_chacha::ChaCha8Rng {
    stream(seed, Purpose::Eval, &[sync_index as u64, round as u64])
}

/// Scores every alive G-sync generator at a metric round and returns the
/// report of the best one (argmax proxy inception score, ties to the
/// lowest index).
fn best_gsync_report(
    run: &MultiRun<'_>,
    scorer: &Scorer,
    round: usize,
) -> Result<MetricReport, OrchError> {
    let candidates = run.state.alive_gsyncs();
    if candidates.is_empty() {
        return Err(OrchError::NoAliveGsync);
    }
    let mut reports = Vec::with_capacity(candidates.len());
    for &s in &candidates {
        let mut rng = eval_rng(run.config.seed, s.index, round);
        reports.push(scorer.score(&run.gen_spec, &run.state.sync_models[&s], round, &mut rng)?);
    }
    let scores: Vec<f64> = reports.iter().map(|r| r.proxy_is).collect();
    let best = select_best_index(&scores).expect("nonempty");
    Ok(reports.swap_remove(best))
}

/// Runs the all-vs-all architecture to completion.
pub fn run_multi(
    config: &RunConfig,
    shards: &[LabeledSet],
    scorer: &Scorer,
    resume: Option<RoundState>,
    mut on_metric_round: impl FnMut(&ArchState, &MetricReport) -> Result<(), OrchError>,
) -> Result<RunOutput, OrchError> {
    let mut run = match resume {
        Some(state) => MultiRun::resume(config, shards, state)?,
        None => MultiRun::new(config, shards)?,
    };
    let mut rows = Vec::new();
    for round in (run.state.round + 1)..=config.epochs {
        run.round(round)?;
        if is_metric_round(round, config.metric_every) || round == config.epochs {
            run.state.snap_to_f32();
            let report = best_gsync_report(&run, scorer, round)?;
            on_metric_round(&ArchState::Multi(run.state.clone()), &report)?;
            rows.push(report);
        }
    }
    let (best_generator, best_score) = run.terminate(|s, w| {
        let mut rng = eval_rng(config.seed, s.index, 0);
        Ok(scorer.proxy_is_only(&run.gen_spec, w, &mut rng)?)
    })?;
    Ok(RunOutput {
        rows,
        best_generator,
        best_score,
        final_state: ArchState::Multi(run.state),
    })
}

fn run_baseline(
    config: &RunConfig,
    shards: &[LabeledSet],
    scorer: &Scorer,
    aggregate_discs: bool,
    resume: Option<BaselineState>,
    mut on_metric_round: impl FnMut(&ArchState, &MetricReport) -> Result<(), OrchError>,
) -> Result<RunOutput, OrchError> {
    let mut run = match resume {
        Some(state) => BaselineRun::resume(config, shards, aggregate_discs, state)?,
        None => BaselineRun::new(config, shards, aggregate_discs)?,
    };
    let mut rows = Vec::new();
    for round in (run.state.round + 1)..=config.epochs {
        run.round(round)?;
        if is_metric_round(round, config.metric_every) || round == config.epochs {
            run.state.snap_to_f32();
            let mut rng = eval_rng(config.seed, 1, round);
            let report = scorer.score(&run.gen_spec, &run.state.global.gen, round, &mut rng)?;
            on_metric_round(&ArchState::Baseline(run.state.clone()), &report)?;
            rows.push(report);
        }
    }
    let mut rng = eval_rng(config.seed, 1, 0);
    let best_score = scorer.proxy_is_only(&run.gen_spec, &run.state.global.gen, &mut rng)?;
    Ok(RunOutput {
        rows,
        best_generator: run.state.global.gen.clone(),
        best_score,
        final_state: ArchState::Baseline(run.state),
    })
}

/// Runs the classic baseline: both networks averaged every round.
pub fn run_flgan(
    config: &RunConfig,
    shards: &[LabeledSet],
    scorer: &Scorer,
    resume: Option<BaselineState>,
    on_metric_round: impl FnMut(&ArchState, &MetricReport) -> Result<(), OrchError>,
) -> Result<RunOutput, OrchError> {
    run_baseline(config, shards, scorer, true, resume, on_metric_round)
}

/// Runs the generator-only baseline: discriminators stay local forever.
pub fn run_aflgan(
    config: &RunConfig,
    shards: &[LabeledSet],
    scorer: &Scorer,
    resume: Option<BaselineState>,
    on_metric_round: impl FnMut(&ArchState, &MetricReport) -> Result<(), OrchError>,
) -> Result<RunOutput, OrchError> {
    run_baseline(config, shards, scorer, false, resume, on_metric_round)
}

/// Validates the config and dispatches to the right architecture.
pub fn run(
    config: &RunConfig,
    shards: &[LabeledSet],
    scorer: &Scorer,
    resume: Option<ArchState>,
    on_metric_round: impl FnMut(&ArchState, &MetricReport) -> Result<(), OrchError>,
) -> Result<RunOutput, OrchError> {
    config.validate()?;
    if shards.len() != config.n_clients {
        return Err(OrchError::ShardMismatch { expected: config.n_clients, got: shards.len() });
    }
    match (config.arch, resume) {
        (Arch::MultiFlgan, None) => run_multi(config, shards, scorer, None, on_metric_round),
        (Arch::MultiFlgan, Some(ArchState::Multi(s))) => {
            run_multi(config, shards, scorer, Some(s), on_metric_round)
        }
        (Arch::Flgan, None) => run_flgan(config, shards, scorer, None, on_metric_round),
        (Arch::Flgan, Some(ArchState::Baseline(s))) => {
            run_flgan(config, shards, scorer, Some(s), on_metric_round)
        }
        (Arch::Aflgan, None) => run_aflgan(config, shards, scorer, None, on_metric_round),
        (Arch::Aflgan, Some(ArchState::Baseline(s))) => {
            run_aflgan(config, shards, scorer, Some(s), on_metric_round)
        }
        _ => Err(OrchError::ResumeArchMismatch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::AttackKind;
    use crate::data::{make_ring_mixture, MixtureSpec};
    use crate::metrics::FrozenClassifier;
    use crate::nn::init_params;
    use crate::stream::derive_seed;
    use std::collections::BTreeSet;

    fn flu(g: usize, d: usize) -> FluId {
        FluId { g, d }
    }

    fn gsync(index: usize) -> SyncId {
        SyncId { kind: SyncKind::G, index }
    }

    fn dsync(index: usize) -> SyncId {
        SyncId { kind: SyncKind::D, index }
    }

    fn tiny_config(arch: Arch, n: usize, x: usize, y: usize, seed: u64) -> RunConfig {
        RunConfig {
            arch,
            x,
            y,
            n_clients: n,
            epochs: 2,
            alpha: 2e-3,
            lr_scaling: false,
            lr_cap: Some(0.05),
            weight_decay: 0.0,
            aggregator: AggregatorKind::Fedavg,
            seed,
            batch: 8,
            z_dim: 3,
            metric_every: 1,
            local_steps: 1,
            gen_loss: GenLossKind::NonSaturating,
            gen_hidden: vec![6],
            disc_hidden: vec![6],
            attack: None,
            faults: vec![],
            data: DataConfig::default(),
        }
    }

    fn shards(n: usize, per: usize, seed: u64) -> Vec<LabeledSet> {
        let all = make_ring_mixture(&MixtureSpec { seed, ..MixtureSpec::default() }, n * per)
            .unwrap();
        (0..n)
            .map(|c| all.select(&(c * per..(c + 1) * per).collect::<Vec<_>>()))
            .collect()
    }

    fn cheap_scorer(seed: u64) -> Scorer {
        let mixture = MixtureSpec::default();
        let spec =
            NetSpec::new(vec![2, 8, mixture.mode_count], OutputActivation::Softmax).unwrap();
        let clf = FrozenClassifier {
            weights: init_params(&spec, seed),
            spec,
            holdout_accuracy: 1.0,
            mixture,
        };
        Scorer::new(clf, 64, derive_seed(seed, &[9])).unwrap()
    }

    #[test]
    fn effective_lr_scales_with_client_count_and_caps() {
        let mut c = tiny_config(Arch::MultiFlgan, 20, 1, 1, 1);
        c.alpha = 2e-4;
        c.lr_scaling = true;
        assert_eq!(c.effective_lr(), 4e-3);
        c.n_clients = 300;
        assert_eq!(c.effective_lr(), 0.05);
        c.lr_cap = None;
        assert!((c.effective_lr() - 0.06).abs() < 1e-15);
        c.lr_scaling = false;
        assert_eq!(c.effective_lr(), 2e-4);
    }

    #[test]
    fn baselines_always_run_one_flu() {
        let c = tiny_config(Arch::Flgan, 4, 3, 2, 1);
        assert_eq!((c.effective_x(), c.effective_y()), (1, 1));
        let c = tiny_config(Arch::Aflgan, 4, 3, 2, 1);
        assert_eq!((c.effective_x(), c.effective_y()), (1, 1));
        let c = tiny_config(Arch::MultiFlgan, 4, 3, 2, 1);
        assert_eq!((c.effective_x(), c.effective_y()), (3, 2));
    }

    #[test]
    fn validation_errors_name_the_offending_field() {
        let fields = [
            ({
                let mut c = tiny_config(Arch::MultiFlgan, 2, 1, 1, 1);
                c.x = 0;
                c
            }, "X"),
            ({
                let mut c = tiny_config(Arch::MultiFlgan, 4, 1, 1, 1);
                c.aggregator = AggregatorKind::Krum { f: 1 };
                c
            }, "aggregator"),
            ({
                let mut c = tiny_config(Arch::MultiFlgan, 4, 1, 1, 1);
                c.aggregator = AggregatorKind::TrimmedMean { trim_k: 2 };
                c
            }, "aggregator"),
            ({
                let mut c = tiny_config(Arch::MultiFlgan, 2, 1, 1, 1);
                c.faults = vec![FaultEvent {
                    at_round: 1,
                    target: FaultTarget::Flu(flu(2, 1)),
                    kind: FaultKind::Drop,
                }];
                c
            }, "faults"),
            ({
                let mut c = tiny_config(Arch::MultiFlgan, 2, 1, 1, 1);
                c.attack = Some(AttackSpec {
                    kind: AttackKind::FreeRider,
                    malicious_clients: BTreeSet::from([5]),
                    poison_dist: (0.0, 1.0),
                    start_round: 1,
                });
                c
            }, "attack"),
            ({
                let mut c = tiny_config(Arch::MultiFlgan, 2, 1, 1, 1);
                c.alpha = f64::NAN;
                c
            }, "alpha"),
        ];
        for (config, want) in fields {
            match config.validate() {
                Err(OrchError::InvalidConfig { field, .. }) => assert_eq!(field, want),
                other => panic!("expected InvalidConfig for {want}, got {other:?}"),
            }
        }
    }

    #[test]
    fn baseline_fault_on_flu_is_rejected() {
        let mut c = tiny_config(Arch::Flgan, 3, 1, 1, 1);
        c.faults = vec![FaultEvent {
            at_round: 1,
            target: FaultTarget::Flu(flu(1, 1)),
            kind: FaultKind::Drop,
        }];
        assert!(c.validate().is_ok());
        c.faults[0].target = FaultTarget::Client(7);
        assert!(c.validate().is_err());
    }

    #[test]
    fn minimal_json_config_applies_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"arch": "MULTI_FLGAN", "N": 3, "seed": 7}"#).unwrap();
        assert_eq!(c.arch, Arch::MultiFlgan);
        assert_eq!((c.x, c.y, c.n_clients), (1, 1, 3));
        assert_eq!(c.epochs, 100);
        assert_eq!(c.alpha, 2e-4);
        assert!(c.lr_scaling);
        assert_eq!(c.lr_cap, Some(0.05));
        assert_eq!(c.batch, 64);
        assert_eq!(c.metric_every, 10);
        assert_eq!(c.aggregator, AggregatorKind::Fedavg);
        assert!(serde_json::from_str::<RunConfig>(
            r#"{"arch": "FLGAN", "N": 3, "seed": 7, "bogus": 1}"#
        )
        .is_err());
    }

    #[test]
    fn fault_event_json_roundtrips() {
        let text = r#"{"at_round": 3, "target": {"flu": {"g": 1, "d": 2}}}"#;
        let event: FaultEvent = serde_json::from_str(text).unwrap();
        assert_eq!(event.at_round, 3);
        assert_eq!(event.target, FaultTarget::Flu(flu(1, 2)));
        assert_eq!(event.kind, FaultKind::Drop);
        let back: FaultEvent =
            serde_json::from_str(&serde_json::to_string(&event).unwrap()).unwrap();
        assert_eq!(back, event);
        let client: FaultEvent =
            serde_json::from_str(r#"{"at_round": 1, "target": {"client": 0}}"#).unwrap();
        assert_eq!(client.target, FaultTarget::Client(0));
    }

    #[test]
    fn metric_round_schedule() {
        assert!(!is_metric_round(0, 10));
        assert!(!is_metric_round(5, 10));
        assert!(is_metric_round(10, 10));
        assert!(!is_metric_round(15, 10));
        assert!(is_metric_round(20, 10));
        assert!(is_metric_round(1, 1));
        assert!(!is_metric_round(0, 1));
    }

    #[test]
    fn bootstrap_syncs_average_their_connected_flus() {
        let config = tiny_config(Arch::MultiFlgan, 2, 2, 2, 11);
        let data = shards(2, 24, 5);
        let run = MultiRun::new(&config, &data).unwrap();
        let init = |g, d| {
            GanPair::init(&run.gen_spec, &run.disc_spec, config.seed, flu(g, d))
        };
        let g1 = fedavg(&[init(1, 1).gen, init(1, 2).gen]).unwrap();
        assert_eq!(run.state.sync_models[&gsync(1)], g1);
        let d2 = fedavg(&[init(1, 2).disc, init(2, 2).disc]).unwrap();
        assert_eq!(run.state.sync_models[&dsync(2)], d2);
    }

    #[test]
    fn sync_step_copies_sync_models_into_every_replica() {
        let config = tiny_config(Arch::MultiFlgan, 3, 2, 2, 3);
        let data = shards(3, 24, 5);
        let mut run = MultiRun::new(&config, &data).unwrap();
        run.sync_step();
        for &f in &run.topology.flus {
            let model = &run.state.flu_models[&f];
            assert_eq!(model.gen, run.state.sync_models[&gsync(f.g)]);
            assert_eq!(model.disc, run.state.sync_models[&dsync(f.d)]);
            for replica in &run.state.replicas[&f] {
                assert_eq!(replica, model);
            }
        }
    }

    #[test]
    fn zero_lr_round_is_a_fixpoint_after_first_sync() {
        let mut config = tiny_config(Arch::MultiFlgan, 2, 2, 1, 17);
        config.alpha = 0.0;
        config.weight_decay = 0.0;
        let data = shards(2, 24, 5);
        let mut run = MultiRun::new(&config, &data).unwrap();
        run.round(1).unwrap();
        let after_one = run.state.clone();
        run.round(2).unwrap();
        assert_eq!(run.state.sync_models, after_one.sync_models);
        assert_eq!(run.state.flu_models, after_one.flu_models);
        assert_eq!(run.state.replicas, after_one.replicas);
    }

    #[test]
    fn single_client_single_flu_matches_direct_training() {
        let config = tiny_config(Arch::MultiFlgan, 1, 1, 1, 23);
        let data = shards(1, 32, 6);
        let mut run = MultiRun::new(&config, &data).unwrap();
        let start = GanPair::init(&run.gen_spec, &run.disc_spec, config.seed, flu(1, 1));
        assert_eq!(run.state.sync_models[&gsync(1)], start.gen);
        run.round(1).unwrap();
        let expect = client_update(
            &config,
            &run.gen_spec,
            &run.disc_spec,
            &start,
            &data[0],
            0,
            flu(1, 1),
            1,
        )
        .unwrap();
        assert_eq!(run.state.sync_models[&gsync(1)], expect.gen);
        assert_eq!(run.state.sync_models[&dsync(1)], expect.disc);
        assert_eq!(run.state.flu_models[&flu(1, 1)], expect);
    }

    #[test]
    fn multi_at_x1_y1_matches_flgan_bitwise() {
        let config_m = tiny_config(Arch::MultiFlgan, 3, 1, 1, 29);
        let config_f = tiny_config(Arch::Flgan, 3, 1, 1, 29);
        let data = shards(3, 24, 7);
        let mut multi = MultiRun::new(&config_m, &data).unwrap();
        let mut base = BaselineRun::new(&config_f, &data, true).unwrap();
        for round in 1..=3 {
            multi.round(round).unwrap();
            base.round(round).unwrap();
            assert_eq!(
                multi.state.sync_models[&gsync(1)], base.state.global.gen,
                "generators diverged at round {round}"
            );
            assert_eq!(
                multi.state.sync_models[&dsync(1)], base.state.global.disc,
                "discriminators diverged at round {round}"
            );
        }
    }

    #[test]
    fn generator_only_baseline_never_touches_global_disc() {
        let config = tiny_config(Arch::Aflgan, 3, 1, 1, 31);
        let data = shards(3, 24, 8);
        let mut run = BaselineRun::new(&config, &data, false).unwrap();
        let init_disc = run.state.global.disc.clone();
        let init_gen = run.state.global.gen.clone();
        for round in 1..=2 {
            run.round(round).unwrap();
        }
        assert_eq!(run.state.global.disc, init_disc);
        assert_ne!(run.state.global.gen, init_gen);
        assert_ne!(run.state.clients[0].disc, run.state.clients[1].disc);
    }

    #[test]
    fn dead_client_is_excluded_from_aggregation() {
        let mut config = tiny_config(Arch::MultiFlgan, 2, 1, 1, 37);
        config.faults = vec![FaultEvent {
            at_round: 1,
            target: FaultTarget::Client(1),
            kind: FaultKind::Drop,
        }];
        let data = shards(2, 24, 9);
        let mut run = MultiRun::new(&config, &data).unwrap();
        run.apply_faults(1).unwrap();
        run.sync_step();
        run.train_flu_step(1).unwrap();
        let survivor = run.state.replicas[&flu(1, 1)][0].clone();
        run.update_flu_step(1).unwrap();
        assert_eq!(run.state.flu_models[&flu(1, 1)], survivor);
        assert_eq!(run.state.alive_clients, vec![true, false]);
    }

    #[test]
    fn dead_flu_keeps_its_model_and_sync_skips_it() {
        let mut config = tiny_config(Arch::MultiFlgan, 2, 2, 1, 41);
        config.faults = vec![FaultEvent {
            at_round: 1,
            target: FaultTarget::Flu(flu(1, 2)),
            kind: FaultKind::Drop,
        }];
        let data = shards(2, 24, 10);
        let mut run = MultiRun::new(&config, &data).unwrap();
        let dead_model = run.state.flu_models[&flu(1, 2)].clone();
        run.round(1).unwrap();
        assert_eq!(run.state.flu_models[&flu(1, 2)], dead_model);
        assert_eq!(
            run.state.sync_models[&gsync(1)],
            run.state.flu_models[&flu(1, 1)].gen
        );
    }

    #[test]
    fn terminating_with_all_gsyncs_dead_errors() {
        let config = tiny_config(Arch::MultiFlgan, 2, 1, 1, 43);
        let data = shards(2, 24, 11);
        let mut run = MultiRun::new(&config, &data).unwrap();
        inject_fault(
            &mut run.state,
            &FaultEvent { at_round: 1, target: FaultTarget::Sync(gsync(1)), kind: FaultKind::Drop },
        )
        .unwrap();
        match run.terminate(|_, _| Ok(1.0)) {
            Err(OrchError::NoAliveGsync) => {}
            other => panic!("expected NoAliveGsync, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fault_target_errors() {
        let config = tiny_config(Arch::MultiFlgan, 2, 1, 1, 47);
        let data = shards(2, 24, 12);
        let mut run = MultiRun::new(&config, &data).unwrap();
        let event = FaultEvent {
            at_round: 1,
            target: FaultTarget::Flu(flu(3, 3)),
            kind: FaultKind::Drop,
        };
        assert!(matches!(
            inject_fault(&mut run.state, &event),
            Err(OrchError::UnknownFaultTarget(_))
        ));
    }

    #[test]
    fn overflowing_aggregate_reports_nonfinite() {
        let config = tiny_config(Arch::MultiFlgan, 2, 1, 1, 53);
        let data = shards(2, 24, 13);
        let mut run = MultiRun::new(&config, &data).unwrap();
        for replica in run.state.replicas.get_mut(&flu(1, 1)).unwrap() {
            replica.gen.values[0] = f64::MAX;
        }
        match run.update_flu_step(1) {
            Err(OrchError::NonFinite { round: 1, .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn free_riders_return_the_synced_model_unchanged() {
        let mut config = tiny_config(Arch::MultiFlgan, 3, 1, 1, 59);
        config.attack = Some(AttackSpec {
            kind: AttackKind::FreeRider,
            malicious_clients: BTreeSet::from([2]),
            poison_dist: (0.0, 1.0),
            start_round: 1,
        });
        let data = shards(3, 24, 14);
        let mut run = MultiRun::new(&config, &data).unwrap();
        run.sync_step();
        let synced = run.state.flu_models[&flu(1, 1)].clone();
        run.train_flu_step(1).unwrap();
        assert_eq!(run.state.replicas[&flu(1, 1)][2], synced);
        assert_ne!(run.state.replicas[&flu(1, 1)][0], synced);
    }

    #[test]
    fn poisoners_submit_noise_from_their_own_stream() {
        let mut config = tiny_config(Arch::MultiFlgan, 2, 1, 1, 61);
        config.attack = Some(AttackSpec {
            kind: AttackKind::Poison,
            malicious_clients: BTreeSet::from([1]),
            poison_dist: (0.0, 5.0),
            start_round: 2,
        });
        let data = shards(2, 24, 15);
        let mut run = MultiRun::new(&config, &data).unwrap();
        run.round(1).unwrap();
        let honest_round1 = run.state.replicas[&flu(1, 1)][1].clone();
        assert!(honest_round1.gen.values.iter().all(|v| v.abs() < 5.0));
        run.round(2).unwrap();
        let poisoned = &run.state.replicas[&flu(1, 1)][1];
        let spread = poisoned
            .gen
            .values
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / poisoned.gen.len() as f64;
        assert!(spread > 1.0, "poisoned weights should be wide, got variance {spread}");
    }

    #[test]
    fn full_runs_are_deterministic() {
        let mut config = tiny_config(Arch::MultiFlgan, 2, 2, 1, 67);
        config.epochs = 4;
        config.metric_every = 2;
        let data = shards(2, 24, 16);
        let scorer = cheap_scorer(67);
        let a = run(&config, &data, &scorer, None, |_, _| Ok(())).unwrap();
        let b = run(&config, &data, &scorer, None, |_, _| Ok(())).unwrap();
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.best_generator, b.best_generator);
        assert_eq!(a.best_score, b.best_score);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.round, rb.round);
            assert_eq!(ra.proxy_is.to_bits(), rb.proxy_is.to_bits());
            assert_eq!(ra.frechet.to_bits(), rb.frechet.to_bits());
            assert_eq!(ra.mode_coverage, rb.mode_coverage);
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        for arch in [Arch::MultiFlgan, Arch::Flgan, Arch::Aflgan] {
            let mut config = tiny_config(arch, 2, 2, 1, 71);
            config.epochs = 4;
            config.metric_every = 2;
            let data = shards(2, 24, 17);
            let scorer = cheap_scorer(71);
            let mut snapshot = None;
            let full = run(&config, &data, &scorer, None, |state, report| {
                if report.round == 2 {
                    snapshot = Some(state.clone());
                }
                Ok(())
            })
            .unwrap();
            let resumed =
                run(&config, &data, &scorer, snapshot, |_, _| Ok(())).unwrap();
            assert_eq!(resumed.rows.len(), 1, "{arch}: one metric round after resume");
            let last_full = full.rows.last().unwrap();
            let last_resumed = resumed.rows.last().unwrap();
            assert_eq!(last_full.round, last_resumed.round, "{arch}");
            assert_eq!(
                last_full.proxy_is.to_bits(),
                last_resumed.proxy_is.to_bits(),
                "{arch}: proxy scores diverged"
            );
            assert_eq!(
                last_full.frechet.to_bits(),
                last_resumed.frechet.to_bits(),
                "{arch}: frechet diverged"
            );
            assert_eq!(full.best_generator, resumed.best_generator, "{arch}");
        }
    }

    #[test]
    fn resume_with_wrong_architecture_errors() {
        let config = tiny_config(Arch::Flgan, 2, 1, 1, 73);
        let data = shards(2, 24, 18);
        let scorer = cheap_scorer(73);
        let multi_config = tiny_config(Arch::MultiFlgan, 2, 1, 1, 73);
        let multi = run(&multi_config, &data, &scorer, None, |_, _| Ok(())).unwrap();
        match run(&config, &data, &scorer, Some(multi.final_state), |_, _| Ok(())) {
            Err(OrchError::ResumeArchMismatch) => {}
            other => panic!("expected ResumeArchMismatch, got {other:?}"),
        }
    }

    #[test]
    fn shard_count_must_match_client_count() {
        let config = tiny_config(Arch::Flgan, 3, 1, 1, 79);
        let data = shards(2, 24, 19);
        let scorer = cheap_scorer(79);
        match run(&config, &data, &scorer, None, |_, _| Ok(())) {
            Err(OrchError::ShardMismatch { expected: 3, got: 2 }) => {}
            other => panic!("expected ShardMismatch, got {other:?}"),
        }
    }

    #[test]
    fn run_ids_are_stable_and_arch_dependent() {
        let c = tiny_config(Arch::MultiFlgan, 5, 2, 3, 9);
        assert_eq!(c.run_id(), "MULTI_FLGAN-N5-X2-Y3-s9");
        let c = tiny_config(Arch::Aflgan, 5, 2, 3, 9);
        assert_eq!(c.run_id(), "AFLGAN-N5-X1-Y1-s9");
    }
}
