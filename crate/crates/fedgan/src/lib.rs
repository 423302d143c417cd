//! Deterministic desk-scale simulator for federated GAN training.
//!
//! The library models a federation of `N` clients that jointly train
//! generative adversarial networks under three architectures:
//!
//! - **MULTI-FLGAN**: an all-vs-all game between `Y` generators and `X`
//!   discriminators, organised as `X*Y` federated learning units (FLUs)
//!   coordinated by per-generator and per-discriminator sync servers.
//! - **FLGAN**: the classic baseline. One GAN per client, and the server
//!   averages both networks every round.
//! - **AFLGAN**: a variant that averages only generators; discriminators
//!   stay local to their client forever.
//!
//! Everything is a pure function of the run configuration and its seed:
//! two runs with the same config produce bit-identical weights and metric
//! rows regardless of how many worker threads execute them.
//!
//! The crate is organised along the moving parts of the protocol:
//!
//! - [`nn`]: minimal dense networks with manual backpropagation.
//! - [`data`]: ring-mixture data, IDX ingestion, non-iid partitioning.
//! - [`topology`]: FLU / sync-server graph allocation.
//! - [`aggregation`]: fedavg plus robust alternatives (median,
//!   trimmed mean, Krum) and best-model selection.
//! - [`adversary`]: free-rider and model-poisoning clients.
//! - [`metrics`]: proxy inception score, 2-D Fréchet distance, mode
//!   coverage, stability, and the cost model.
//! - [`orchestrator`]: the per-round protocol engine and baselines.
//! - [`experiment`]: config files, sweep execution, checkpoints, CSV
//!   reports.

pub mod adversary;
pub mod aggregation;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod stream;
pub mod topology;

pub use aggregation::AggregatorKind;
pub use nn::{NetSpec, OptimizerState, OutputActivation, WeightVector};
pub use orchestrator::{Arch, RunConfig};
pub use topology::{FluId, SyncId, Topology};
