//! Datasets: ring-mixture generation, IDX ingestion, subsampling,
//! non-iid partitioning and per-client batch streams.
//!
//! The workhorse distribution is a 2-D Gaussian ring mixture: `k` modes
//! evenly spaced on a circle, small enough to fit inside the (-1, 1)
//! square a tanh generator can reach. Image data arrives as IDX files
//! and can be average-pooled down to a dense-net-friendly size.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{stream, Purpose};

/// Default minibatch size for every training loop.
pub const DEFAULT_BATCH_SIZE: usize = 64;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Errors from dataset construction and ingestion.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("invalid mixture spec: {0}")]
    BadSpec(String),
    #[error("need at least {need} samples, have {have}")]
    TooFewSamples { need: usize, have: usize },
    #[error("cannot subsample {want} from {have} samples")]
    SubsampleTooLarge { want: usize, have: usize },
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated IDX data while reading {context}")]
    Truncated { context: &'static str },
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("operation requires 2-D points, set has dim {dim}")]
    NotTwoDimensional { dim: usize },
}

/// A ring of `mode_count` Gaussian modes with shared isotropic `sigma`,
/// centred on the origin at radius `ring_radius`. Mode `j` sits at angle
/// `2*pi*j / mode_count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub mode_count: usize,
    pub ring_radius: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec { mode_count: 8, ring_radius: 0.7, sigma: 0.05, seed: 0 }
    }
}

impl MixtureSpec {
    /// Centre of mode `j`.
    pub fn mode_center(&self, j: usize) -> (f64, f64) {
        let angle = 2.0 * std::f64::consts::PI * j as f64 / self.mode_count as f64;
        (self.ring_radius * angle.cos(), self.ring_radius * angle.sin())
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.mode_count < 1 {
            return Err(DataError::BadSpec("mode_count must be >= 1".into()));
        }
        if self.ring_radius.is_nan() || self.ring_radius <= 0.0 {
            return Err(DataError::BadSpec("ring_radius must be positive".into()));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(DataError::BadSpec("sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Points with a class/mode label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Number of classes, as max label + 1.
    pub fn class_count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// New set holding the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            points: self.points.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// CSV dump with header `x,y,label`. Only defined for 2-D points.
    pub fn to_csv(&self) -> Result<String, DataError> {
        if self.dim() != 2 {
            return Err(DataError::NotTwoDimensional { dim: self.dim() });
        }
        let mut out = String::from("x,y,label\n");
        for (row, &label) in self.points.rows().into_iter().zip(&self.labels) {
            out.push_str(&format!("{},{},{}\n", row[0], row[1], label));
        }
        Ok(out)
    }
}

/// Draws `n` labeled points from the ring mixture. Labels are assigned
/// round-robin, so per-mode counts differ by at most one.
pub fn make_ring_mixture(spec: &MixtureSpec, n: usize) -> Result<LabeledSet, DataError> {
    spec.validate()?;
    if n < spec.mode_count {
        return Err(DataError::TooFewSamples { need: spec.mode_count, have: n });
    }
    let mut rng = stream(spec.seed, Purpose::Data, &[spec.mode_count as u64]);
    let mut points = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let j = i % spec.mode_count;
        let (cx, cy) = spec.mode_center(j);
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        points[(i, 0)] = cx + spec.sigma * nx;
        points[(i, 1)] = cy + spec.sigma * ny;
        labels.push(j);
    }
    Ok(LabeledSet { points, labels })
}

/// Uniform subsample without replacement, deterministic in `seed`.
pub fn subsample_training_set(
    d: &LabeledSet,
    t_size: usize,
    seed: u64,
) -> Result<LabeledSet, DataError> {
    if t_size > d.len() {
        return Err(DataError::SubsampleTooLarge { want: t_size, have: d.len() });
    }
    let mut rng = stream(seed, Purpose::Data, &[1]);
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(t_size);
    Ok(d.select(&idx))
}

/// How samples are spread across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// A random cut of [0, 1] into per-client fractions; shuffled samples
    /// are assigned by consecutive runs. Uneven sizes, even labels.
    Fractions,
    /// Per-class client proportions drawn from a symmetric
    /// Dirichlet(alpha); small alpha concentrates each label on few
    /// clients.
    LabelSkew { alpha: f64 },
}

impl Default for PartitionMode {
    fn default() -> Self {
        PartitionMode::LabelSkew { alpha: 0.5 }
    }
}

/// A disjoint, exhaustive split of sample indices across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_shards: Vec<Vec<usize>>,
    pub fractions: Vec<f64>,
    pub skew_alpha: Option<f64>,
}

/// Dataset block of a run configuration: the mixture to draw from, the
/// sizes of the sample pool and the training subsample, the evaluation
/// set size, and how shards are split across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mixture: MixtureSpec,
    pub pool_size: usize,
    pub train_size: usize,
    pub eval_samples: usize,
    pub partition: PartitionMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mixture: MixtureSpec::default(),
            pool_size: 60_000,
            train_size: 5_000,
            eval_samples: 2_000,
            partition: PartitionMode::default(),
        }
    }
}

/// Splits cumulative proportions into monotone index boundaries over `m`
/// items, with boundary 0 at 0 and the last at `m`.
fn boundaries(cum: &[f64], m: usize) -> Vec<usize> {
    let mut b: Vec<usize> = cum.iter().map(|&c| (c * m as f64).round() as usize).collect();
    b.insert(0, 0);
    *b.last_mut().expect("nonempty") = m;
    for i in 1..b.len() {
        if b[i] < b[i - 1] {
            b[i] = b[i - 1];
        }
    }
    b
}

/// Moves single samples from the largest shards into empty ones, so every
/// client ends up with at least one sample.
fn repair_empty_shards(shards: &mut [Vec<usize>]) {
    loop {
        let Some(empty) = shards.iter().position(|s| s.is_empty()) else {
            return;
        };
        let donor = (0..shards.len())
            .filter(|&i| shards[i].len() > 1)
            .max_by_key(|&i| shards[i].len())
            .expect("enough samples for every client");
        let moved = shards[donor].pop().expect("donor nonempty");
        shards[empty].push(moved);
    }
}

/// Symmetric Dirichlet(alpha) draw over `n` coordinates via normalised
/// Gamma samples; falls back to uniform if everything underflows.
fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|&x| x / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// Splits `t` across `n_clients` clients. Shards are pairwise disjoint,
/// cover every index, and are never empty.
pub fn partition_noniid(
    t: &LabeledSet,
    n_clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Partition, DataError> {
    if n_clients < 1 || n_clients > t.len() {
        return Err(DataError::TooManyClients { clients: n_clients, samples: t.len() });
    }
    let mut rng = stream(seed, Purpose::Data, &[2]);
    match mode {
        PartitionMode::Fractions => {
            let mut cuts: Vec<f64> = (0..n_clients - 1).map(|_| rng.random::<f64>()).collect();
            cuts.sort_by(|a, b| a.total_cmp(b));
            cuts.push(1.0);
            let mut fractions = Vec::with_capacity(n_clients);
            let mut prev = 0.0;
            for &c in &cuts {
                fractions.push(c - prev);
                prev = c;
            }
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rng);
            let b = boundaries(&cuts, t.len());
            let mut shards: Vec<Vec<usize>> = (0..n_clients)
                .map(|i| idx[b[i]..b[i + 1]].to_vec())
                .collect();
            repair_empty_shards(&mut shards);
            Ok(Partition { client_shards: shards, fractions, skew_alpha: None })
        }
        PartitionMode::LabelSkew { alpha } => {
            if alpha.is_nan() || alpha <= 0.0 {
                return Err(DataError::BadSpec("skew alpha must be positive".into()));
            }
            let classes = t.class_count().max(1);
            let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
            for c in 0..classes {
                let mut members: Vec<usize> =
                    (0..t.len()).filter(|&i| t.labels[i] == c).collect();
                members.shuffle(&mut rng);
                let p = dirichlet(alpha, n_clients, &mut rng);
                let mut cum = Vec::with_capacity(n_clients);
                let mut acc = 0.0;
                for &pi in &p {
                    acc += pi;
                    cum.push(acc);
                }
                let b = boundaries(&cum, members.len());
                for i in 0..n_clients {
                    shards[i].extend_from_slice(&members[b[i]..b[i + 1]]);
                }
            }
            repair_empty_shards(&mut shards);
            let total = t.len() as f64;
            let fractions = shards.iter().map(|s| s.len() as f64 / total).collect();
            Ok(Partition { client_shards: shards, fractions, skew_alpha: Some(alpha) })
        }
    }
}

/// Raw images and labels read from a pair of IDX files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxSet {
    pub images: Vec<Vec<u8>>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u8>,
}

fn read_u32_be(bytes: &[u8], at: usize, context: &'static str) -> Result<u32, DataError> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or(DataError::Truncated { context })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("four bytes")))
}

/// Parses a matching pair of IDX image and label files.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<IdxSet, DataError> {
    let magic = read_u32_be(image_bytes, 0, "image header")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_IMAGE_MAGIC, got: magic });
    }
    let n_images = read_u32_be(image_bytes, 4, "image header")? as usize;
    let rows = read_u32_be(image_bytes, 8, "image header")? as usize;
    let cols = read_u32_be(image_bytes, 12, "image header")? as usize;
    let pixels = image_bytes
        .get(16..)
        .ok_or(DataError::Truncated { context: "image header" })?;
    if pixels.len() != n_images * rows * cols {
        return Err(DataError::Truncated { context: "image payload" });
    }

    let label_magic = read_u32_be(label_bytes, 0, "label header")?;
    if label_magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_LABEL_MAGIC, got: label_magic });
    }
    let n_labels = read_u32_be(label_bytes, 4, "label header")? as usize;
    let labels = label_bytes
        .get(8..)
        .ok_or(DataError::Truncated { context: "label header" })?;
    if labels.len() != n_labels {
        return Err(DataError::Truncated { context: "label payload" });
    }
    if n_images != n_labels {
        return Err(DataError::CountMismatch { images: n_images, labels: n_labels });
    }

    let images = pixels.chunks(rows * cols).map(|c| c.to_vec()).collect();
    Ok(IdxSet { images, rows, cols, labels: labels.to_vec() })
}

/// Serialises an [`IdxSet`] back into (image file bytes, label file
/// bytes); the exact inverse of [`parse_idx`].
pub fn serialize_idx(set: &IdxSet) -> (Vec<u8>, Vec<u8>) {
    let mut image_bytes = Vec::new();
    image_bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(set.images.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(set.rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(set.cols as u32).to_be_bytes());
    for img in &set.images {
        image_bytes.extend_from_slice(img);
    }
    let mut label_bytes = Vec::new();
    label_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(set.labels.len() as u32).to_be_bytes());
    label_bytes.extend_from_slice(&set.labels);
    (image_bytes, label_bytes)
}

/// Average-pools each image down to `target x target` and rescales pixel
/// means to [-1, 1]. Pool windows cover the source evenly, so 28-pixel
/// rows pool in runs of 3 or 4.
pub fn downsample_idx(set: &IdxSet, target: usize) -> LabeledSet {
    let bound = |i: usize, len: usize| i * len / target;
    let mut points = Array2::zeros((set.images.len(), target * target));
    for (img_i, img) in set.images.iter().enumerate() {
        for br in 0..target {
            for bc in 0..target {
                let (r0, r1) = (bound(br, set.rows), bound(br + 1, set.rows));
                let (c0, c1) = (bound(bc, set.cols), bound(bc + 1, set.cols));
                let mut sum = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        sum += img[r * set.cols + c] as f64;
                    }
                }
                let mean = sum / ((r1 - r0) * (c1 - c0)) as f64;
                points[(img_i, br * target + bc)] = mean / 127.5 - 1.0;
            }
        }
    }
    LabeledSet { points, labels: set.labels.iter().map(|&l| l as usize).collect() }
}

/// Endless minibatch source over one client's shard. Each epoch visits
/// every row once in a fresh shuffled order; a batch that crosses the
/// epoch boundary continues into the reshuffled next epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    /// Stream over `len` rows driven by a dedicated RNG stream.
    pub fn new(len: usize, mut rng: ChaCha8Rng) -> BatchStream {
        assert!(len > 0, "batch stream over an empty shard");
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchStream { order, pos: 0, rng }
    }

    /// The next `b` row indices.
    pub fn next_indices(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// The next `b` points from `shard` under `stream`'s epoch order.
pub fn next_batch(shard: &LabeledSet, b: usize, stream: &mut BatchStream) -> Array2<f64> {
    shard.points.select(Axis(0), &stream.next_indices(b))
}

/// As [`next_batch`] but also returns the matching labels.
pub fn next_batch_labeled(
    shard: &LabeledSet,
    b: usize,
    stream: &mut BatchStream,
) -> (Array2<f64>, Vec<usize>) {
    let idx = stream.next_indices(b);
    let labels = idx.iter().map(|&i| shard.labels[i]).collect();
    (shard.points.select(Axis(0), &idx), labels)
}
