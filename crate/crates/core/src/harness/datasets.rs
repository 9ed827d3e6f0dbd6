//! Synthetic generators and on-disk archive readers.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Environment variable overriding the data directory.
pub const DATA_DIR_ENV: &str = "PGK_DATA_DIR";

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    /// Gaussian blobs, one per class.
    #[serde(alias = "synthetic")]
    TwoClusters,
    TwoMoons,
    /// 28×28 grayscale images in the IDX layout.
    Idx,
    /// CIFAR-10 binary batches.
    Cifar10,
}

impl DatasetName {
    pub fn is_synthetic(self) -> bool {
        matches!(self, DatasetName::TwoClusters | DatasetName::TwoMoons)
    }
}

/// Where the data comes from and how much of it to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// Training samples kept after seeded subsetting; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_size: Option<usize>,
    /// Evaluation samples kept; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_size: Option<usize>,
    /// Falls back to `$PGK_DATA_DIR`, then `./data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Per-channel standardization inside the model.
    #[serde(default)]
    pub normalization: bool,
    /// Generator settings; ignored for archives.
    #[serde(default = "defaults::train_samples")]
    pub train_samples: usize,
    #[serde(default = "defaults::eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "defaults::features")]
    pub features: usize,
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Seed of the generator and of subsetting.
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn train_samples() -> usize {
        1000
    }
    pub fn eval_samples() -> usize {
        500
    }
    pub fn features() -> usize {
        2
    }
    pub fn noise() -> f64 {
        0.1
    }
}

impl DatasetSpec {
    pub fn new(name: DatasetName) -> Self {
        DatasetSpec {
            name,
            subset_size: None,
            eval_size: None,
            data_dir: None,
            normalization: false,
            train_samples: defaults::train_samples(),
            eval_samples: defaults::eval_samples(),
            features: defaults::features(),
            noise: defaults::noise(),
            seed: 0,
        }
    }

    /// Archive directory: `PGK_DATA_DIR`, else `data_dir`, else `./data`.
    pub fn resolved_dir(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_synthetic() {
            if self.train_samples == 0 || self.eval_samples == 0 {
                return Err(Error::config("dataset.train_samples", "generators need at least one sample per split"));
            }
            if self.features < 2 {
                return Err(Error::config("dataset.features", "must be at least 2"));
            }
            if !(self.noise >= 0.0 && self.noise.is_finite()) {
                return Err(Error::config("dataset.noise", "must be finite and non-negative"));
            }
        }
        if self.subset_size == Some(0) {
            return Err(Error::config("dataset.subset_size", "must be positive"));
        }
        if self.eval_size == Some(0) {
            return Err(Error::config("dataset.eval_size", "must be positive"));
        }
        Ok(())
    }
}

/// Train and evaluation splits, each with ids unique within the split.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset<f32>, Dataset<f32>)> {
    spec.validate()?;
    let (train, eval) = match spec.name {
        DatasetName::TwoClusters => (
            two_clusters(spec.train_samples, spec.features, spec.noise, spec.seed),
            two_clusters(spec.eval_samples, spec.features, spec.noise, spec.seed ^ EVAL_SALT),
        ),
        DatasetName::TwoMoons => (
            two_moons(spec.train_samples, spec.features, spec.noise, spec.seed),
            two_moons(spec.eval_samples, spec.features, spec.noise, spec.seed ^ EVAL_SALT),
        ),
        DatasetName::Cifar10 => {
            let dir = spec.resolved_dir();
            check_dir(&dir)?;
            let train = CIFAR_TRAIN
                .iter()
                .map(|f| read_cifar_file(&dir.join(f)))
                .collect::<Result<Vec<_>>>()?;
            (concat(train)?, read_cifar_file(&dir.join(CIFAR_TEST))?)
        }
        DatasetName::Idx => {
            let dir = spec.resolved_dir();
            check_dir(&dir)?;
            (
                read_idx_pair(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?,
                read_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?,
            )
        }
    };
    let train = match spec.subset_size {
        Some(n) => train.subset(n, spec.seed)?,
        None => train,
    };
    let eval = match spec.eval_size {
        Some(n) => eval
            .subset(n, spec.seed ^ EVAL_SALT)
            .map_err(|_| Error::config("dataset.eval_size", format!("{n} exceeds the {} evaluation samples", eval.len())))?,
        None => eval,
    };
    Ok((train, eval))
}

const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn check_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::config(
            "dataset.data_dir",
            format!("{} is not a directory (set data_dir or {DATA_DIR_ENV})", dir.display()),
        ))
    }
}

/// Per-channel mean and standard deviation of an image dataset.
pub fn channel_stats(data: &Dataset<f32>) -> (Vec<f64>, Vec<f64>) {
    let channels = if data.sample_shape.len() == 3 { data.sample_shape[0] } else { 1 };
    let per = data.sample_len() / channels;
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for s in data.inputs.chunks(data.sample_len()) {
        for (c, plane) in s.chunks(per).enumerate() {
            for &v in plane {
                sum[c] += v as f64;
                sq[c] += (v as f64).powi(2);
            }
        }
    }
    let n = (data.len() * per) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(1e-12).sqrt()).collect();
    (mean, std)
}

/// Map every feature column affinely onto `[0.05, 0.95]` using the fixed box `[lo, hi]`, then clamp.
fn squash(points: &mut [f64], lo: f64, hi: f64) {
    for p in points {
        *p = (0.05 + 0.9 * (*p - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
}

fn finish(points: Vec<f64>, labels: Vec<usize>, features: usize) -> Dataset<f32> {
    let n = labels.len();
    Dataset::new(
        points.into_iter().map(|v| v as f32).collect(),
        labels,
        (0..n as u64).collect(),
        vec![features],
        2,
    )
    .expect("generator output is consistent")
}

/// Two Gaussian blobs centred at `±1` along every axis.
pub fn two_clusters(n: usize, features: usize, noise: f64, seed: u64) -> Dataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE) * 5.0).expect("finite deviation");
    let mut points = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let centre = if y == 0 { -1.0 } else { 1.0 };
        points.extend((0..features).map(|_| centre + gauss.sample(&mut rng)));
        labels.push(y);
    }
    squash(&mut points, -3.0, 3.0);
    finish(points, labels, features)
}

/// Interleaved half circles in the first two features; the rest are noise.
pub fn two_moons(n: usize, features: usize, noise: f64, seed: u64) -> Dataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite deviation");
    let mut points = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (px, py) = if y == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        points.push(px + gauss.sample(&mut rng));
        points.push(py + gauss.sample(&mut rng));
        points.extend((2..features).map(|_| gauss.sample(&mut rng)));
        labels.push(y);
    }
    squash(&mut points, -1.5, 2.5);
    finish(points, labels, features)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn ingestion(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// One CIFAR-10 binary batch; ids are record indices within the file.
pub fn read_cifar_file(path: &Path) -> Result<Dataset<f32>> {
    parse_cifar(&read_file(path)?, path)
}

/// Parse `label, 1024 red, 1024 green, 1024 blue` records.
pub fn parse_cifar(bytes: &[u8], path: &Path) -> Result<Dataset<f32>> {
    if bytes.is_empty() {
        return Err(ingestion(path, 0, "empty file"));
    }
    let rem = bytes.len() % CIFAR_RECORD;
    if rem != 0 {
        return Err(ingestion(
            path,
            bytes.len() - rem,
            format!("truncated record: {rem} trailing bytes, records are {CIFAR_RECORD} bytes"),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut inputs = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(ingestion(path, i * CIFAR_RECORD, format!("label {} outside 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(inputs, labels, (0..n as u64).collect(), vec![3, 32, 32], 10)
}

fn concat(parts: Vec<Dataset<f32>>) -> Result<Dataset<f32>> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for p in &parts {
        inputs.extend_from_slice(&p.inputs);
        labels.extend_from_slice(&p.labels);
    }
    let n = labels.len() as u64;
    let first = parts.first().ok_or_else(|| Error::InvalidInput("no batches".into()))?;
    Dataset::new(inputs, labels, (0..n).collect(), first.sample_shape.clone(), first.num_classes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingestion(path, at, "unexpected end of header"))
}

/// Images of an IDX `ubyte` archive: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0803 {
        return Err(ingestion(path, 0, format!("magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(ingestion(
            path,
            bytes.len().min(need),
            format!("expected {need} bytes for {n} images of {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].iter().map(|&b| b as f32 / 255.0).collect()))
}

/// Labels of an IDX `ubyte` archive.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0801 {
        return Err(ingestion(path, 0, format!("magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(ingestion(path, bytes.len().min(8 + n), format!("expected {n} labels, found {}", bytes.len() - 8)));
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if b < 10 {
                Ok(b as usize)
            } else {
                Err(ingestion(path, 8 + i, format!("label {b} outside 0..10")))
            }
        })
        .collect()
}

fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset<f32>> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let y = parse_idx_labels(&read_file(labels)?, labels)?;
    if y.len() != n {
        return Err(ingestion(labels, 4, format!("{} labels for {n} images", y.len())));
    }
    Dataset::new(pixels, y, (0..n as u64).collect(), vec![1, rows, cols], 10)
}
