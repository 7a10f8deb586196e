//! Datasets, IDX parsing, synthetic clusters and label-skew partitioning.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{self, Purpose, SimRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled examples with row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("dataset has no examples"));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape("feature matrix does not match label count"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Gather the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, self.dim, labels)
    }

    /// The first `n` examples, keeping the class count.
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Dataset::new(
            self.features[..n * self.dim].to_vec(),
            self.dim,
            self.labels[..n].to_vec(),
            self.num_classes,
            self.split,
        )
    }
}

fn read_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(field, "file truncated inside the header"))
}

/// Parse an IDX image file (magic `0x00000803`) into `(count, rows*cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            "images.magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = read_u32(bytes, 4, "images.count")? as usize;
    let rows = read_u32(bytes, 8, "images.rows")? as usize;
    let cols = read_u32(bytes, 12, "images.cols")? as usize;
    let dim = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * dim {
        return Err(Error::parse(
            "images.payload",
            format!(
                "header declares {count} images of {dim} bytes but only {} bytes follow",
                payload.len()
            ),
        ));
    }
    Ok((count, dim, &payload[..count * dim]))
}

/// Parse an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            "labels.magic",
            format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = read_u32(bytes, 4, "labels.count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::parse(
            "labels.payload",
            format!(
                "header declares {count} labels but only {} bytes follow",
                payload.len()
            ),
        ));
    }
    Ok(&payload[..count])
}

/// Decode an image/label IDX pair. Pixels are scaled to `[0, 1]`; the class
/// count is one more than the largest label.
pub fn decode_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::parse(
            "labels.count",
            format!("{} labels for {count} images", label_bytes.len()),
        ));
    }
    if count == 0 {
        return Err(Error::parse("images.count", "no examples"));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, dim, labels, num_classes.max(2), split)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_idx(&images, &labels, split)
}

/// Encode images (each `rows * cols` bytes) in IDX format.
pub fn encode_idx_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * (rows * cols) as usize);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Distance of each class mean from the origin in [`make_synthetic`].
pub const SYNTHETIC_RADIUS: f64 = 3.0;
/// Default per-coordinate standard deviation around each class mean.
pub const SYNTHETIC_SPREAD: f64 = 0.5;

/// Gaussian class clusters.
///
/// Class `c` is centred at `SYNTHETIC_RADIUS · (cos 2πc/C, sin 2πc/C, 0, …)`
/// (for `dim == 1`, at `SYNTHETIC_RADIUS · c`); samples add isotropic noise
/// with standard deviation [`SYNTHETIC_SPREAD`]. Examples are emitted class
/// by class.
pub fn make_synthetic(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset> {
    make_synthetic_with_spread(num_classes, n_per_class, dim, SYNTHETIC_SPREAD, seed)
}

pub fn make_synthetic_with_spread(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    if n_per_class == 0 || dim == 0 {
        return Err(Error::config(
            "synthetic data needs n_per_class >= 1 and dim >= 1",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config("synthetic spread must be finite and >= 0"));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng::stream(seed, Purpose::Synthetic, &[]);
    let mut features = Vec::with_capacity(num_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for c in 0..num_classes {
        let mut mean = vec![0.0; dim];
        if dim == 1 {
            mean[0] = SYNTHETIC_RADIUS * c as f64;
        } else {
            let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
            mean[0] = SYNTHETIC_RADIUS * angle.cos();
            mean[1] = SYNTHETIC_RADIUS * angle.sin();
        }
        for _ in 0..n_per_class {
            features.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(features, dim, labels, num_classes, Split::Train)
}

/// Example indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
    num_groups: usize,
}

impl Partition {
    pub fn from_assignments(assignments: Vec<Vec<usize>>, num_groups: usize) -> Self {
        Self {
            assignments,
            num_groups,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn clients_per_group(&self) -> usize {
        self.assignments.len() / self.num_groups.max(1)
    }

    /// Group of a client: clients `g·K/C .. (g+1)·K/C` form group `g`.
    pub fn group_of(&self, client: usize) -> usize {
        client / self.clients_per_group().max(1)
    }

    pub fn client(&self, client: usize) -> &[usize] {
        &self.assignments[client]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }
}

/// Label-skew partition.
///
/// Clients are split evenly into `C` groups. An example with label `c` goes
/// to group `c` with probability `q` and to each other group with
/// probability `(1 - q) / (C - 1)`; inside the chosen group it goes to one
/// member client uniformly at random.
pub fn partition_noniid(
    dataset: &Dataset,
    num_clients: usize,
    q: f64,
    seed: u64,
) -> Result<Partition> {
    let c = dataset.num_classes();
    if !(q.is_finite() && q >= 1.0 / c as f64 - 1e-12 && q <= 1.0) {
        return Err(Error::config(format!(
            "q = {q} outside [1/C, 1] for C = {c}"
        )));
    }
    if num_clients < c {
        return Err(Error::config(format!(
            "{num_clients} clients cannot form {c} groups"
        )));
    }
    if !num_clients.is_multiple_of(c) {
        return Err(Error::config(format!(
            "client count {num_clients} is not divisible by the class count {c}"
        )));
    }
    let per_group = num_clients / c;
    let mut rng = rng::stream(seed, Purpose::Partition, &[]);
    let mut assignments = vec![Vec::new(); num_clients];
    for (i, &label) in dataset.labels().iter().enumerate() {
        let u: f64 = rng.random();
        let group = if u < q {
            label
        } else {
            // uniform over the C-1 other groups
            let k = rng.random_range(0..c - 1);
            if k >= label {
                k + 1
            } else {
                k
            }
        };
        let member = rng.random_range(0..per_group);
        assignments[group * per_group + member].push(i);
    }
    Ok(Partition {
        assignments,
        num_groups: c,
    })
}

/// Attacker ids spread evenly over the groups: the lowest-ranked members of
/// each group, taken round-robin (rank 0 of every group, then rank 1, …)
/// until `count` ids are chosen. Returned ascending.
pub fn malicious_ids(num_clients: usize, num_groups: usize, count: usize) -> Result<Vec<usize>> {
    if count > num_clients {
        return Err(Error::config(format!(
            "{count} attackers exceed {num_clients} clients"
        )));
    }
    if num_groups == 0 || !num_clients.is_multiple_of(num_groups) {
        return Err(Error::config("clients do not split evenly into groups"));
    }
    let per_group = num_clients / num_groups;
    let mut ids: Vec<usize> = (0..per_group)
        .flat_map(|rank| (0..num_groups).map(move |g| g * per_group + rank))
        .take(count)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// `B` examples drawn uniformly with replacement from the client's data.
pub fn sample_batch(
    dataset: &Dataset,
    partition: &Partition,
    client: usize,
    batch_size: usize,
    rng: &mut SimRng,
) -> Result<Batch> {
    let owned = partition
        .assignments
        .get(client)
        .ok_or_else(|| Error::config(format!("client {client} outside the partition")))?;
    if owned.is_empty() {
        return Err(Error::EmptyClient(client));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let picks: Vec<usize> = (0..batch_size)
        .map(|_| owned[rng.random_range(0..owned.len())])
        .collect();
    dataset.batch(&picks)
}

/// Uniform sample of `amount` distinct values from `0..length`, ascending.
pub(crate) fn sample_distinct(rng: &mut SimRng, length: usize, amount: usize) -> Vec<usize> {
    let mut ids = index::sample(rng, length, amount).into_vec();
    ids.sort_unstable();
    ids
}
