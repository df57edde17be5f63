//! Synthetic task generation, federated partitioning and IDX file loading.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Dataset;
use crate::rng::rng_from_seed;

/// Gaussian class clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Distance between any two class means.
    pub separation: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n: 4000, d: 20, classes: 4, separation: 3.0, noise_std: 1.0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("synthetic data needs at least 2 classes"));
        }
        if self.n < self.classes {
            return Err(invalid("synthetic data needs n >= classes"));
        }
        if self.d == 0 {
            return Err(invalid("synthetic data needs d >= 1"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(invalid("separation must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PartitionKind {
    Iid {},
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub n_clients: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { kind: PartitionKind::Dirichlet { alpha: 0.3 }, n_clients: 10 }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(invalid("n_clients must be at least 1"));
        }
        if let PartitionKind::Dirichlet { alpha } = self.kind {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(invalid("dirichlet alpha must be positive"));
            }
        }
        Ok(())
    }
}

fn class_means(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let radius = spec.separation / std::f64::consts::SQRT_2;
    if spec.classes <= spec.d {
        // scaled basis vectors: every pair sits exactly `separation` apart
        (0..spec.classes)
            .map(|c| {
                let mut m = vec![0.0; spec.d];
                m[c] = radius;
                m
            })
            .collect()
    } else {
        (0..spec.classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * radius / norm).collect()
            })
            .collect()
    }
}

/// Draws `n` points from isotropic Gaussians around per-class means.
/// Labels cycle through the classes, so counts are balanced within one.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let means = class_means(spec, &mut rng);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(spec.n * spec.d);
    for &label in &labels {
        for &mu in &means[label] {
            let z: f64 = rng.sample(StandardNormal);
            features.push(mu + spec.noise_std * z);
        }
    }
    Dataset::new(spec.d, spec.classes, features, labels)
}

/// Splits `data` into `(train, holdout)` with `holdout_fraction` of rows held out.
pub fn train_holdout_split(data: &Dataset, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(invalid("holdout fraction must be in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_hold = (data.len() as f64 * holdout_fraction).round() as usize;
    let (hold, train) = order.split_at(n_hold);
    Ok((data.subset(train), data.subset(hold)))
}

/// Splits `data` into disjoint client shards whose union is exactly `data`.
///
/// Dirichlet partitioning draws, for every class, client proportions from
/// `Dir(alpha)` and deals that class's rows accordingly. Clients left empty
/// receive one row from the largest shard so that every shard can train.
pub fn partition(data: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<Dataset>> {
    spec.validate()?;
    let k = spec.n_clients;
    if k > data.len() {
        return Err(invalid(format!("cannot split {} rows across {} clients", data.len(), k)));
    }
    let mut rng = rng_from_seed(seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];

    match spec.kind {
        PartitionKind::Iid {} => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for (pos, row) in order.into_iter().enumerate() {
                shards[pos % k].push(row);
            }
        }
        PartitionKind::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(e.to_string()))?;
            for class in 0..data.classes() {
                let mut rows: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
                if rows.is_empty() {
                    continue;
                }
                rows.shuffle(&mut rng);
                let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = props.iter().sum();
                if sum > 0.0 && sum.is_finite() {
                    props.iter_mut().for_each(|p| *p /= sum);
                } else {
                    // every gamma draw underflowed: hand the class to one client
                    props = vec![0.0; k];
                    props[rng.random_range(0..k)] = 1.0;
                }
                let n = rows.len();
                let mut start = 0;
                let mut cum = 0.0;
                for (client, p) in props.iter().enumerate() {
                    cum += p;
                    let end = if client + 1 == k { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
                    shards[client].extend_from_slice(&rows[start..end]);
                    start = end;
                }
            }
            for client in 0..k {
                if shards[client].is_empty() {
                    let donor = (0..k).max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c))).unwrap();
                    let row = shards[donor].pop().unwrap();
                    shards[client].push(row);
                }
            }
        }
    }
    Ok(shards.iter().map(|rows| data.subset(rows)).collect())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("images: dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Format(format!("images: expected {need} pixel bytes, found {}", body.len())));
    }
    Ok((count, rows, cols, body))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!("labels: expected {count} bytes, found {}", body.len())));
    }
    Ok(body)
}

/// Builds a dataset from raw IDX image and label file contents. Pixels are
/// scaled by 1/255; the class count is one past the largest label (min 2).
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!("{count} images but {} labels", labels.len())));
    }
    if rows * cols == 0 {
        return Err(Error::Format("images have zero pixels".into()));
    }
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(rows * cols, classes, features, labels)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    dataset_from_idx(&images, &labels)
}

/// Serializes a dataset as an IDX image/label pair. Features must lie in
/// `[0, 1]`; they are written as `round(255 x)`.
pub fn idx_bytes(data: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != data.dim() {
        return Err(Error::Shape(format!("{rows}x{cols} images cannot hold {} features", data.dim())));
    }
    let mut images = Vec::with_capacity(16 + data.features().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(data.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    for &x in data.features() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Range(format!("pixel value {x} outside [0, 1]")));
        }
        images.push((x * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &l in data.labels() {
        let byte = u8::try_from(l).map_err(|_| Error::Range(format!("label {l} does not fit a byte")))?;
        labels.push(byte);
    }
    Ok((images, labels))
}

pub fn write_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = idx_bytes(data, rows, cols)?;
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}
