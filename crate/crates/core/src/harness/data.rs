use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
const CIFAR_CLASSES: usize = 10;

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Oriented gratings plus Gaussian noise, one orientation per class.
    Synthetic { per_class: usize, classes: usize, noise: f64, seed: u64 },
    /// CIFAR-10 binary batches (`data_batch_*.bin` / `test_batch.bin`).
    Cifar10 { dir: PathBuf, train: bool, limit: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Per-channel normalization applied to raw [0, 1] pixels.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl DatasetSpec {
    pub fn synthetic(per_class: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic { per_class, classes: 3, noise: 0.25, seed },
            mean: [0.5; 3],
            std: [0.3; 3],
        }
    }

    pub fn cifar10(dir: impl Into<PathBuf>, train: bool) -> Self {
        Self {
            source: DataSource::Cifar10 { dir: dir.into(), train, limit: None },
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

/// Normalized images `[N, C, H, W]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: DenseTensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// One mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: DenseTensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: DenseTensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn item_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Items at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let n = self.item_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Batch { images: DenseTensor::new(shape, data).expect("sizes agree"), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let b = self.select(idx);
        Dataset { images: b.images, labels: b.labels, num_classes: self.num_classes }
    }

    /// Mini-batches in order, or shuffled deterministically by `seed`. The
    /// last batch may be smaller.
    pub fn batches(&self, batch_size: usize, shuffle: Option<u64>) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.chunks(batch_size.max(1)).map(|c| self.select(c)).collect()
    }

    /// Deterministic split into (first, second) with `fraction` in the first.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((self.len() as f64) * fraction).round() as usize;
        (self.subset(&order[..k]), self.subset(&order[k..]))
    }
}

fn normalize(raw: &mut [f32], channels: usize, mean: &[f32; 3], std: &[f32; 3]) {
    let plane = raw.len() / channels;
    for (c, chunk) in raw.chunks_mut(plane).enumerate() {
        let (m, s) = (mean[c % 3], std[c % 3]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Raw [0, 1] grating image `[3, side, side]`.
fn grating<R: Rng + ?Sized>(rng: &mut R, class: usize, classes: usize, side: usize, noise: f64) -> Vec<f32> {
    let angle = PI * class as f64 / classes as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let freq = 2.0 * PI / 8.0 * rng.random_range(0.85..1.15);
    let phase = rng.random_range(-0.5..0.5);
    let gauss = Normal::new(0.0, noise).expect("noise is finite and non-negative");
    let mut out = Vec::with_capacity(3 * side * side);
    for _ in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let wave = (freq * (x as f64 * ca + y as f64 * sa) + phase).cos();
                out.push((0.5 + 0.35 * wave + gauss.sample(rng)) as f32);
            }
        }
    }
    out
}

fn synthetic(per_class: usize, classes: usize, noise: f64, seed: u64, spec: &DatasetSpec) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("synthetic data needs positive sizes and finite noise"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(per_class * classes * 3 * CIFAR_SIDE * CIFAR_SIDE);
    let mut labels = Vec::with_capacity(per_class * classes);
    for i in 0..per_class * classes {
        let class = i % classes;
        let mut img = grating(&mut rng, class, classes, CIFAR_SIDE, noise);
        normalize(&mut img, 3, &spec.mean, &spec.std);
        data.extend(img);
        labels.push(class);
    }
    Dataset::new(DenseTensor::new([labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, classes)
}

/// Parses CIFAR-10 binary records; `name` labels errors.
pub fn parse_cifar_records(bytes: &[u8], name: &str, spec: &DatasetSpec) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let rec = bytes.len() / CIFAR_RECORD;
        return Err(Error::Data(format!("{name}: record {rec} is truncated ({} of {CIFAR_RECORD} bytes)", bytes.len() % CIFAR_RECORD)));
    }
    let mut data = Vec::with_capacity(bytes.len() / CIFAR_RECORD * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!("{name}: record {i} has label {label}")));
        }
        let mut img: Vec<f32> = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        normalize(&mut img, 3, &spec.mean, &spec.std);
        data.extend(img);
        labels.push(label);
    }
    Ok((data, labels))
}

fn cifar10(dir: &Path, train: bool, limit: Option<usize>, spec: &DatasetSpec) -> Result<Dataset> {
    let files: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".to_string()]
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(&f);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (d, l) = parse_cifar_records(&bytes, &f, spec)?;
        data.extend(d);
        labels.extend(l);
        if limit.is_some_and(|n| labels.len() >= n) {
            break;
        }
    }
    if let Some(n) = limit.filter(|&n| n < labels.len()) {
        labels.truncate(n);
        data.truncate(n * CIFAR_PIXELS);
    }
    Dataset::new(DenseTensor::new([labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, CIFAR_CLASSES)
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::config("normalization std must be positive"));
    }
    match &spec.source {
        DataSource::Synthetic { per_class, classes, noise, seed } => synthetic(*per_class, *classes, *noise, *seed, spec),
        DataSource::Cifar10 { dir, train, limit } => cifar10(dir, *train, *limit, spec),
    }
}
