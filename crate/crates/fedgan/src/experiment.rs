//! Config files, experiment matrices, checkpoints, and CSV results.
//!
//! A config file is a single JSON object: a run config (no `kind` key)
//! describes one run, an experiment plan (with a `kind` key) expands
//! into the cross product of architectures, client counts, and seeds.
//! Runs of a plan may execute in parallel; the result rows are assembled
//! in plan order, so reruns of the same plan produce byte-identical CSV
//! output except for the wall-clock column.
//!
//! Checkpoints live in one directory per metric round: `manifest.json`
//! carries the run identity, shapes, and section layout; `weights.bin`
//! is a magic header followed by little-endian f32 weights, concatenated
//! in manifest order. Weights are rounded to f32 before they are scored
//! or written, so a resumed run continues bit-identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AttackSpec;
use crate::aggregation::AggregatorKind;
use crate::data::{
    make_ring_mixture, partition_noniid, subsample_training_set, DataConfig, DataError,
    LabeledSet, MixtureSpec,
};
use crate::metrics::{FrozenClassifier, MetricError, MetricReport, Scorer};
use crate::nn::NetSpec;
use crate::nn::WeightVector;
use crate::orchestrator::{
    run, Arch, ArchState, BaselineState, FaultTarget, OrchError, RoundState, RunConfig,
};
use crate::stream::derive_seed;
use crate::topology::{allocate, GanPair, SyncKind};

/// Errors from config loading, experiment execution, and persistence.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("corrupt checkpoint at {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint does not match the run config: {0}")]
    CheckpointMismatch(String),
    #[error("bad results CSV: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Orch(#[from] OrchError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Topology(#[from] crate::topology::TopologyError),
}

fn corrupt(path: &Path, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() }
}

/// The header every results CSV starts with.
pub const CSV_HEADER: &str = "run_id,arch,N,X,Y,seed,round,proxy_is,frechet,mode_coverage,wall_seconds";

/// One line of a results CSV: the metrics of one run at one metric
/// round. Failed runs record one final row with NaN scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub arch: Arch,
    pub n_clients: usize,
    pub x: usize,
    pub y: usize,
    pub seed: u64,
    pub round: usize,
    pub proxy_is: f64,
    pub frechet: f64,
    pub mode_coverage: usize,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.arch,
            self.n_clients,
            self.x,
            self.y,
            self.seed,
            self.round,
            self.proxy_is,
            self.frechet,
            self.mode_coverage,
            self.wall_seconds
        )
    }
}

/// Renders rows as a full CSV document, header included.
pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

/// Parses a results CSV produced by [`rows_to_csv`].
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(ExperimentError::BadCsv(format!(
                "expected header {CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(ExperimentError::BadCsv(format!(
                "line {}: expected 11 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| ExperimentError::BadCsv(format!("line {}: bad {what}", i + 2));
        rows.push(ResultRow {
            run_id: fields[0].to_string(),
            arch: fields[1].parse().map_err(|_| bad("arch"))?,
            n_clients: fields[2].parse().map_err(|_| bad("N"))?,
            x: fields[3].parse().map_err(|_| bad("X"))?,
            y: fields[4].parse().map_err(|_| bad("Y"))?,
            seed: fields[5].parse().map_err(|_| bad("seed"))?,
            round: fields[6].parse().map_err(|_| bad("round"))?,
            proxy_is: fields[7].parse().map_err(|_| bad("proxy_is"))?,
            frechet: fields[8].parse().map_err(|_| bad("frechet"))?,
            mode_coverage: fields[9].parse().map_err(|_| bad("mode_coverage"))?,
            wall_seconds: fields[10].parse().map_err(|_| bad("wall_seconds"))?,
        });
    }
    Ok(rows)
}

/// What an experiment plan varies and how its results are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// Vary the client count; compare final-round scores across N.
    ClientSweep,
    /// Watch scores over rounds at a fixed client count.
    LearningCurve,
    /// A sweep with an adversary configured.
    Attack,
    /// Exactly one run: the first architecture, count, and seed.
    Single,
}

fn default_client_counts() -> Vec<usize> {
    vec![2, 3, 5, 10, 20]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_archs() -> Vec<Arch> {
    vec![Arch::MultiFlgan, Arch::Flgan, Arch::Aflgan]
}

fn default_plan_epochs() -> usize {
    100
}

fn default_plan_metric_every() -> usize {
    10
}

fn default_two() -> usize {
    2
}

/// A matrix of runs. Expands to `archs x client_counts x seeds` run
/// configs sharing everything else; `overrides` is merged into every
/// generated config, so any run-config key can be pinned from a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub kind: PlanKind,
    #[serde(default = "default_client_counts")]
    pub client_counts: Vec<usize>,
    #[serde(default = "default_plan_epochs")]
    pub epochs: usize,
    #[serde(default = "default_plan_metric_every")]
    pub metric_every: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_archs")]
    pub archs: Vec<Arch>,
    #[serde(rename = "X", default = "default_two")]
    pub x: usize,
    #[serde(rename = "Y", default = "default_two")]
    pub y: usize,
    #[serde(default)]
    pub aggregator: AggregatorKind,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub data: DataConfig,
    /// Extra run-config fields applied to every generated config.
    #[serde(default)]
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.client_counts.is_empty() {
            return Err(ExperimentError::InvalidPlan("client_counts is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::InvalidPlan("seeds is empty".into()));
        }
        if self.archs.is_empty() {
            return Err(ExperimentError::InvalidPlan("archs is empty".into()));
        }
        if self.kind == PlanKind::Attack && self.attack.is_none() {
            return Err(ExperimentError::InvalidPlan(
                "attack plans need an attack block".into(),
            ));
        }
        Ok(())
    }

    /// Expands the plan into validated run configs, in the fixed order
    /// architecture, then client count, then seed.
    pub fn to_run_configs(&self) -> Result<Vec<RunConfig>, ExperimentError> {
        self.validate()?;
        let (archs, counts, seeds): (&[Arch], &[usize], &[u64]) = match self.kind {
            PlanKind::Single => (&self.archs[..1], &self.client_counts[..1], &self.seeds[..1]),
            _ => (&self.archs, &self.client_counts, &self.seeds),
        };
        let mut out = Vec::new();
        for &arch in archs {
            for &n in counts {
                for &seed in seeds {
                    let mut base = serde_json::json!({
                        "arch": arch,
                        "X": self.x,
                        "Y": self.y,
                        "N": n,
                        "epochs": self.epochs,
                        "metric_every": self.metric_every,
                        "seed": seed,
                        "aggregator": self.aggregator,
                        "data": self.data,
                    });
                    if let Some(attack) = &self.attack {
                        base["attack"] = serde_json::to_value(attack)?;
                    }
                    let obj = base.as_object_mut().expect("object literal");
                    for (k, v) in &self.overrides {
                        obj.insert(k.clone(), v.clone());
                    }
                    let config: RunConfig = serde_json::from_value(base)?;
                    config.validate()?;
                    out.push(config);
                }
            }
        }
        Ok(out)
    }
}

/// A parsed config file: either one run or a whole plan.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigFile {
    Run(Box<RunConfig>),
    Plan(Box<ExperimentPlan>),
}

/// Loads and validates a JSON config file. Objects with a `kind` key are
/// plans, everything else is a single run config. Unknown keys are
/// rejected in both.
pub fn load_config(path: &Path) -> Result<ConfigFile, ExperimentError> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// [`load_config`] for an in-memory string.
pub fn parse_config(text: &str) -> Result<ConfigFile, ExperimentError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("kind").is_some() {
        let plan: ExperimentPlan = serde_json::from_value(value)?;
        plan.validate()?;
        Ok(ConfigFile::Plan(Box::new(plan)))
    } else {
        let config: RunConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(ConfigFile::Run(Box::new(config)))
    }
}

/// Canonical JSON for a run config; `parse(save(c))` round-trips.
pub fn config_to_json(config: &RunConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

/// Draws the sample pool, subsamples the training set, and splits it
/// into per-client shards, all from seeds derived from the run seed.
pub fn prepare_data(config: &RunConfig) -> Result<Vec<LabeledSet>, ExperimentError> {
    let pool = make_ring_mixture(&config.data.mixture, config.data.pool_size)?;
    let train =
        subsample_training_set(&pool, config.data.train_size, derive_seed(config.seed, &[101]))?;
    let partition = partition_noniid(
        &train,
        config.n_clients,
        config.data.partition,
        derive_seed(config.seed, &[102]),
    )?;
    Ok(partition.client_shards.iter().map(|idx| train.select(idx)).collect())
}

/// Loads a cached frozen classifier for `mixture` from `dir`, or trains
/// one and caches it. The cache file is keyed by mode count and mixture
/// seed; a stale file for a different mixture is retrained and replaced.
pub fn load_or_train_classifier(
    mixture: &MixtureSpec,
    dir: &Path,
) -> Result<FrozenClassifier, ExperimentError> {
    let path = dir.join(format!("classifier-k{}-seed{}.json", mixture.mode_count, mixture.seed));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(clf) = FrozenClassifier::from_json(&text) {
            if clf.mixture == *mixture {
                return Ok(clf);
            }
        }
        log::warn!("classifier cache at {} is stale; retraining", path.display());
    }
    let clf = FrozenClassifier::train(mixture, derive_seed(mixture.seed, &[7]))?;
    fs::create_dir_all(dir)?;
    fs::write(&path, clf.to_json())?;
    Ok(clf)
}

/// The scorer every run of a mixture shares: same classifier, same real
/// evaluation set, so scores are comparable across runs.
pub fn build_scorer(
    clf: &FrozenClassifier,
    data: &DataConfig,
) -> Result<Scorer, ExperimentError> {
    Ok(Scorer::new(clf.clone(), data.eval_samples, derive_seed(data.mixture.seed, &[9]))?)
}

/// Leading bytes of every `weights.bin`.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"FGW1";

/// Placement of one named weight vector inside `weights.bin`: `offset`
/// in bytes from the start of the file, `len` in f32 values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionMeta {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

/// The JSON half of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub round: usize,
    pub arch: Arch,
    #[serde(rename = "X")]
    pub x: usize,
    #[serde(rename = "Y")]
    pub y: usize,
    #[serde(rename = "N")]
    pub n_clients: usize,
    pub seed: u64,
    pub gen_spec: NetSpec,
    pub disc_spec: NetSpec,
    /// The metric snapshot taken at this round.
    pub metrics: MetricReport,
    pub sections: Vec<SectionMeta>,
}

/// Named weight sections of a state, in a fixed, documented order:
/// sync servers then FLU models for the all-vs-all state; the global
/// model then per-client models for baseline state.
pub fn state_sections(state: &ArchState) -> Vec<(String, &WeightVector)> {
    match state {
        ArchState::Multi(s) => {
            let mut v = Vec::new();
            for (sync, w) in &s.sync_models {
                v.push((format!("sync/{sync}"), w));
            }
            for (flu, pair) in &s.flu_models {
                v.push((format!("flu/{flu}/gen"), &pair.gen));
                v.push((format!("flu/{flu}/disc"), &pair.disc));
            }
            v
        }
        ArchState::Baseline(s) => {
            let mut v = vec![
                ("global/gen".to_string(), &s.global.gen),
                ("global/disc".to_string(), &s.global.disc),
            ];
            for (i, pair) in s.clients.iter().enumerate() {
                v.push((format!("client/{i}/gen"), &pair.gen));
                v.push((format!("client/{i}/disc"), &pair.disc));
            }
            v
        }
    }
}

/// Writes `manifest.json` and `weights.bin` under
/// `dir/round-NNNNNN/` and returns that directory.
pub fn save_checkpoint(
    dir: &Path,
    config: &RunConfig,
    gen_spec: &NetSpec,
    disc_spec: &NetSpec,
    state: &ArchState,
    metrics: &MetricReport,
) -> Result<PathBuf, ExperimentError> {
    let round = state.round();
    let cp_dir = dir.join(format!("round-{round:06}"));
    fs::create_dir_all(&cp_dir)?;
    let sections = state_sections(state);
    let mut blob: Vec<u8> = Vec::new();
    blob.extend_from_slice(WEIGHTS_MAGIC);
    let mut metas = Vec::with_capacity(sections.len());
    for (name, w) in &sections {
        metas.push(SectionMeta {
            name: name.clone(),
            offset: blob.len() as u64,
            len: w.len() as u64,
        });
        for &v in &w.values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        run_id: config.run_id(),
        round,
        arch: config.arch,
        x: config.effective_x(),
        y: config.effective_y(),
        n_clients: config.n_clients,
        seed: config.seed,
        gen_spec: gen_spec.clone(),
        disc_spec: disc_spec.clone(),
        metrics: metrics.clone(),
        sections: metas,
    };
    fs::write(cp_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(cp_dir.join("weights.bin"), blob)?;
    Ok(cp_dir)
}

fn replayed_fault(config: &RunConfig, round: usize, target: FaultTarget) -> bool {
    config.faults.iter().any(|e| e.at_round <= round && e.target == target)
}

/// Reads a checkpoint directory back into a run state. Verifies the
/// magic, the section layout against the blob length, the directory
/// name against the manifest round, and the manifest identity against
/// `config`. Liveness flags are replayed from the config's fault list.
pub fn load_checkpoint(
    cp_dir: &Path,
    config: &RunConfig,
) -> Result<(ArchState, MetricReport), ExperimentError> {
    let manifest_path = cp_dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if let Some(name) = cp_dir.file_name().and_then(|s| s.to_str()) {
        if let Some(digits) = name.strip_prefix("round-") {
            if digits.parse::<usize>().ok() != Some(manifest.round) {
                return Err(corrupt(
                    cp_dir,
                    format!("directory says {name}, manifest says round {}", manifest.round),
                ));
            }
        }
    }
    if manifest.run_id != config.run_id() {
        return Err(ExperimentError::CheckpointMismatch(format!(
            "checkpoint is for {}, config is {}",
            manifest.run_id,
            config.run_id()
        )));
    }

    let blob_path = cp_dir.join("weights.bin");
    let blob = fs::read(&blob_path)?;
    if blob.len() < WEIGHTS_MAGIC.len() || &blob[..WEIGHTS_MAGIC.len()] != WEIGHTS_MAGIC {
        return Err(corrupt(&blob_path, "bad magic"));
    }
    let mut expected = WEIGHTS_MAGIC.len() as u64;
    for s in &manifest.sections {
        if s.offset != expected {
            return Err(corrupt(
                &blob_path,
                format!("section {} expected at offset {expected}, declared {}", s.name, s.offset),
            ));
        }
        expected += 4 * s.len;
    }
    if blob.len() as u64 != expected {
        return Err(corrupt(
            &blob_path,
            format!("blob is {} bytes, sections declare {expected}", blob.len()),
        ));
    }
    let mut by_name: BTreeMap<&str, WeightVector> = BTreeMap::new();
    for s in &manifest.sections {
        let start = s.offset as usize;
        let values = blob[start..start + 4 * s.len as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        by_name.insert(&s.name, WeightVector::from_values(values));
    }
    let want = |name: String, len: usize| -> Result<WeightVector, ExperimentError> {
        let w = by_name
            .get(name.as_str())
            .ok_or_else(|| corrupt(cp_dir, format!("missing section {name}")))?;
        if w.len() != len {
            return Err(corrupt(
                cp_dir,
                format!("section {name} has {} values, expected {len}", w.len()),
            ));
        }
        Ok(w.clone())
    };

    let gen_len = manifest.gen_spec.param_count();
    let disc_len = manifest.disc_spec.param_count();
    let round = manifest.round;
    let state = match config.arch {
        Arch::MultiFlgan => {
            let topology = allocate(config.effective_x(), config.effective_y())?;
            let mut sync_models = BTreeMap::new();
            for &s in &topology.syncs {
                let len = match s.kind {
                    SyncKind::G => gen_len,
                    SyncKind::D => disc_len,
                };
                sync_models.insert(s, want(format!("sync/{s}"), len)?);
            }
            let mut flu_models = BTreeMap::new();
            for &f in &topology.flus {
                flu_models.insert(
                    f,
                    GanPair {
                        gen: want(format!("flu/{f}/gen"), gen_len)?,
                        disc: want(format!("flu/{f}/disc"), disc_len)?,
                    },
                );
            }
            let replicas = flu_models
                .iter()
                .map(|(&f, pair)| (f, vec![pair.clone(); config.n_clients]))
                .collect();
            ArchState::Multi(RoundState {
                round,
                alive_flus: topology
                    .flus
                    .iter()
                    .map(|&f| (f, !replayed_fault(config, round, FaultTarget::Flu(f))))
                    .collect(),
                alive_syncs: topology
                    .syncs
                    .iter()
                    .map(|&s| (s, !replayed_fault(config, round, FaultTarget::Sync(s))))
                    .collect(),
                alive_clients: (0..config.n_clients)
                    .map(|c| !replayed_fault(config, round, FaultTarget::Client(c)))
                    .collect(),
                sync_models,
                flu_models,
                replicas,
            })
        }
        Arch::Flgan | Arch::Aflgan => {
            let global = GanPair {
                gen: want("global/gen".to_string(), gen_len)?,
                disc: want("global/disc".to_string(), disc_len)?,
            };
            let clients = (0..config.n_clients)
                .map(|i| {
                    Ok(GanPair {
                        gen: want(format!("client/{i}/gen"), gen_len)?,
                        disc: want(format!("client/{i}/disc"), disc_len)?,
                    })
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            ArchState::Baseline(BaselineState {
                round,
                global,
                clients,
                alive_clients: (0..config.n_clients)
                    .map(|c| !replayed_fault(config, round, FaultTarget::Client(c)))
                    .collect(),
            })
        }
    };
    Ok((state, manifest.metrics))
}

/// How one run of a matrix ended.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    pub rows: Vec<ResultRow>,
    /// The guard message if the run died on non-finite weights.
    pub failure: Option<String>,
    pub best_score: Option<f64>,
}

/// Executes one run: prepares its data, scores metric rounds, writes a
/// checkpoint per metric round under `out/checkpoints/<run_id>/`, and
/// returns one result row per metric round.
///
/// A run that trips the non-finite guard is recorded, not propagated:
/// its record ends with a NaN row at the failing round so a matrix can
/// continue past it.
pub fn execute_run(
    config: &RunConfig,
    out_dir: &Path,
    clf: &FrozenClassifier,
    resume: Option<&Path>,
) -> Result<RunRecord, ExperimentError> {
    config.validate()?;
    let shards = prepare_data(config)?;
    let scorer = build_scorer(clf, &config.data)?;
    let data_dim = shards.first().map_or(2, |s| s.dim());
    let gen_spec = config.gen_spec(data_dim)?;
    let disc_spec = config.disc_spec(data_dim)?;
    let run_id = config.run_id();
    let cp_dir = out_dir.join("checkpoints").join(&run_id);
    let resume_state = match resume {
        Some(path) => Some(load_checkpoint(path, config)?.0),
        None => None,
    };

    let start = Instant::now();
    let mut rows: Vec<ResultRow> = Vec::new();
    let row_template = |round: usize, report: Option<&MetricReport>, wall: f64| ResultRow {
        run_id: run_id.clone(),
        arch: config.arch,
        n_clients: config.n_clients,
        x: config.effective_x(),
        y: config.effective_y(),
        seed: config.seed,
        round,
        proxy_is: report.map_or(f64::NAN, |r| r.proxy_is),
        frechet: report.map_or(f64::NAN, |r| r.frechet),
        mode_coverage: report.map_or(0, |r| r.mode_coverage),
        wall_seconds: wall,
    };

    let outcome = {
        let rows = &mut rows;
        run(config, &shards, &scorer, resume_state, |state, report| {
            save_checkpoint(&cp_dir, config, &gen_spec, &disc_spec, state, report)
                .map_err(|e| OrchError::InvalidConfig {
                    field: "out",
                    message: format!("cannot write checkpoint: {e}"),
                })?;
            rows.push(row_template(report.round, Some(report), start.elapsed().as_secs_f64()));
            Ok(())
        })
    };
    match outcome {
        Ok(output) => Ok(RunRecord {
            config: config.clone(),
            rows,
            failure: None,
            best_score: Some(output.best_score),
        }),
        Err(OrchError::NonFinite { round, context }) => {
            let message = format!("non-finite weights at round {round} in {context}");
            log::warn!("{run_id}: {message}; recording a failure row");
            rows.push(row_template(round, None, start.elapsed().as_secs_f64()));
            Ok(RunRecord { config: config.clone(), rows, failure: Some(message), best_score: None })
        }
        Err(e) => Err(e.into()),
    }
}

/// Runs a whole plan and writes `results.csv` into `out_dir`. Runs
/// execute in parallel; rows keep plan order, so reruns are
/// byte-identical except for `wall_seconds`.
pub fn run_experiment(
    plan: &ExperimentPlan,
    out_dir: &Path,
) -> Result<Vec<RunRecord>, ExperimentError> {
    let configs = plan.to_run_configs()?;
    fs::create_dir_all(out_dir)?;
    let mut classifiers: Vec<(MixtureSpec, FrozenClassifier)> = Vec::new();
    for config in &configs {
        if !classifiers.iter().any(|(m, _)| *m == config.data.mixture) {
            let clf = load_or_train_classifier(&config.data.mixture, out_dir)?;
            classifiers.push((config.data.mixture, clf));
        }
    }
    let records: Vec<RunRecord> = configs
        .par_iter()
        .map(|config| {
            let clf = &classifiers
                .iter()
                .find(|(m, _)| *m == config.data.mixture)
                .expect("classifier trained above")
                .1;
            execute_run(config, out_dir, clf, None)
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<ResultRow> = records.iter().flat_map(|r| r.rows.clone()).collect();
    fs::write(out_dir.join("results.csv"), rows_to_csv(&rows))?;
    Ok(records)
}

/// Per-architecture summary over the final row of every run: spread of
/// the proxy inception score and of the Fréchet distance, plus the
/// stability (max minus min) of the Fréchet distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSummary {
    pub arch: Arch,
    pub runs: usize,
    pub failed: usize,
    pub proxy_is_min: f64,
    pub proxy_is_max: f64,
    pub proxy_is_mean: f64,
    pub frechet_min: f64,
    pub frechet_max: f64,
    pub frechet_mean: f64,
    pub frechet_stability: f64,
}

fn spread(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (min, max, mean)
}

/// Reduces result rows to one final-round summary per architecture.
/// Rows with NaN scores count as failed runs and are excluded from the
/// statistics.
pub fn summarize(rows: &[ResultRow]) -> Vec<ArchSummary> {
    let mut finals: BTreeMap<&str, &ResultRow> = BTreeMap::new();
    for row in rows {
        match finals.get(row.run_id.as_str()) {
            Some(old) if old.round >= row.round => {}
            _ => {
                finals.insert(&row.run_id, row);
            }
        }
    }
    let mut out = Vec::new();
    for arch in [Arch::MultiFlgan, Arch::Flgan, Arch::Aflgan] {
        let rows_of: Vec<&&ResultRow> =
            finals.values().filter(|r| r.arch == arch).collect();
        if rows_of.is_empty() {
            continue;
        }
        let ok: Vec<&&&ResultRow> = rows_of
            .iter()
            .filter(|r| r.proxy_is.is_finite() && r.frechet.is_finite())
            .collect();
        let proxy: Vec<f64> = ok.iter().map(|r| r.proxy_is).collect();
        let frechet: Vec<f64> = ok.iter().map(|r| r.frechet).collect();
        let (p_min, p_max, p_mean) = spread(&proxy);
        let (f_min, f_max, f_mean) = spread(&frechet);
        out.push(ArchSummary {
            arch,
            runs: rows_of.len(),
            failed: rows_of.len() - ok.len(),
            proxy_is_min: p_min,
            proxy_is_max: p_max,
            proxy_is_mean: p_mean,
            frechet_min: f_min,
            frechet_max: f_max,
            frechet_mean: f_mean,
            frechet_stability: f_max - f_min,
        });
    }
    out
}

/// Header of the summary CSV.
pub const SUMMARY_HEADER: &str = "arch,runs,failed,proxy_is_min,proxy_is_max,proxy_is_mean,frechet_min,frechet_max,frechet_mean,frechet_stability";

pub fn summary_to_csv(summaries: &[ArchSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.arch,
            s.runs,
            s.failed,
            s.proxy_is_min,
            s.proxy_is_max,
            s.proxy_is_mean,
            s.frechet_min,
            s.frechet_max,
            s.frechet_mean,
            s.frechet_stability
        );
    }
    out
}

/// Fixed-width table of the same numbers, for terminals.
pub fn summary_to_text(summaries: &[ArchSummary]) -> String {
    let mut out = format!(
        "{:<12} {:>4} {:>6} {:>22} {:>28} {:>10}\n",
        "arch", "runs", "failed", "proxy_is min/max/mean", "frechet min/max/mean", "stability"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>6} {:>6.3}/{:>6.3}/{:>6.3} {:>8.3}/{:>8.3}/{:>8.3} {:>10.3}",
            s.arch.to_string(),
            s.runs,
            s.failed,
            s.proxy_is_min,
            s.proxy_is_max,
            s.proxy_is_mean,
            s.frechet_min,
            s.frechet_max,
            s.frechet_mean,
            s.frechet_stability
        );
    }
    out
}

/// Writes the run's datasets to `out/data/` as CSV files: the training
/// subsample, one shard per client, and the shared evaluation set. For
/// the all-vs-all architecture the topology is dumped as JSON too.
/// Returns the paths written.
pub fn write_data_files(
    config: &RunConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let dir = out_dir.join("data");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();

    let pool = make_ring_mixture(&config.data.mixture, config.data.pool_size)?;
    let train =
        subsample_training_set(&pool, config.data.train_size, derive_seed(config.seed, &[101]))?;
    let path = dir.join("train.csv");
    fs::write(&path, train.to_csv()?)?;
    written.push(path);

    let shards = prepare_data(config)?;
    for (i, shard) in shards.iter().enumerate() {
        let path = dir.join(format!("shard-{i:03}.csv"));
        fs::write(&path, shard.to_csv()?)?;
        written.push(path);
    }

    let eval = make_ring_mixture(
        &MixtureSpec { seed: derive_seed(config.data.mixture.seed, &[9]), ..config.data.mixture },
        config.data.eval_samples.max(2),
    )?;
    let path = dir.join("eval.csv");
    fs::write(&path, eval.to_csv()?)?;
    written.push(path);

    if config.arch == Arch::MultiFlgan {
        let topology = allocate(config.effective_x(), config.effective_y())?;
        let path = dir.join("topology.json");
        fs::write(&path, topology.dump_json())?;
        written.push(path);
    }
    Ok(written)
}
