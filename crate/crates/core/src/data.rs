//! Dataset provisioning: MNIST and CIFAR-10 in their published binary
//! formats, plus an in-memory synthetic orientation task for desk-scale runs.
//!
//! Iteration order is a pure function of `(seed, epoch)`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "CHANPRUNE_DATA";

pub const MNIST_MEAN: [f32; 1] = [0.1307];
pub const MNIST_STD: [f32; 1] = [0.3081];
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHandle {
    pub name: String,
    pub split: Split,
    pub subset_fraction: f64,
    pub seed: u64,
    pub sample_count: usize,
    pub class_count: usize,
}

/// Per-channel `(x − mean) / std` applied to inputs scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self { mean: MNIST_MEAN.to_vec(), std: MNIST_STD.to_vec() }
    }

    pub fn cifar10() -> Self {
        Self { mean: CIFAR10_MEAN.to_vec(), std: CIFAR10_STD.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    handle: DatasetHandle,
    sample_shape: [usize; 3],
    inputs: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn from_parts(
        name: impl Into<String>,
        split: Split,
        sample_shape: [usize; 3],
        class_count: usize,
        inputs: Vec<f32>,
        labels: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if inputs.len() != per * labels.len() {
            return Err(Error::Dimension { expected: vec![labels.len(), per], actual: vec![inputs.len()] });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Usage(format!("label {l} out of range for {class_count} classes")));
        }
        let handle = DatasetHandle {
            name: name.into(),
            split,
            subset_fraction: 1.0,
            seed,
            sample_count: labels.len(),
            class_count,
        };
        Ok(Self { handle, sample_shape, inputs, labels })
    }

    pub fn handle(&self) -> &DatasetHandle {
        &self.handle
    }

    pub fn name(&self) -> &str {
        &self.handle.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn classes(&self) -> usize {
        self.handle.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n: usize = self.sample_shape.iter().product();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let per: usize = self.sample_shape.iter().product();
        let mut inputs = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Batch { inputs, labels: indices.iter().map(|&i| self.labels[i]).collect(), sample_shape: self.sample_shape }
    }

    /// Sample order for `epoch`: a ChaCha8 shuffle keyed by `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let key = self.handle.seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        order
    }

    /// Shuffled minibatches for one epoch; the last batch may be short.
    pub fn epoch_batches(&self, batch_size: usize, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let order = self.epoch_order(epoch);
        let bs = batch_size.max(1);
        (0..order.len().div_ceil(bs)).map(move |b| self.gather(&order[b * bs..((b + 1) * bs).min(order.len())]))
    }

    /// Minibatches in storage order.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let bs = batch_size.max(1);
        let n = self.len();
        (0..n.div_ceil(bs)).map(move |b| {
            let idx: Vec<usize> = (b * bs..((b + 1) * bs).min(n)).collect();
            self.gather(&idx)
        })
    }

    /// Keeps only `indices` (in the given order).
    pub fn subset_indices(&self, indices: &[usize]) -> Self {
        let batch = self.gather(indices);
        let mut handle = self.handle.clone();
        handle.sample_count = indices.len();
        Self { handle, sample_shape: self.sample_shape, inputs: batch.inputs, labels: batch.labels }
    }

    /// Class-stratified sample: `round(fraction · n_c)` samples of every class
    /// `c` (at least one when the class is present), chosen by a seeded
    /// shuffle and returned in storage order.
    pub fn stratified_subset(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("subset fraction {fraction} must lie in (0, 1]")));
        }
        if fraction == 1.0 {
            let mut out = self.clone();
            out.handle.seed = seed;
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for class in 0..self.classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let take = ((fraction * idx.len() as f64).round() as usize).max(1);
            keep.extend_from_slice(&idx[..take]);
        }
        keep.sort_unstable();
        let mut out = self.subset_indices(&keep);
        out.handle.subset_fraction = fraction;
        out.handle.seed = seed;
        Ok(out)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.handle.seed = seed;
        self
    }

    #[cfg(test)]
    pub(crate) fn relabel_all(&mut self, label: usize) {
        self.labels.iter_mut().for_each(|l| *l = label);
    }
}

/// Two-class 1×16×16 orientation task: class 0 carries horizontal stripes,
/// class 1 vertical stripes, each with random frequency, phase and contrast
/// plus Gaussian pixel noise of standard deviation `difficulty`.
///
/// Random phase makes the class-conditional pixel means nearly equal, so a
/// linear classifier on raw pixels stays close to chance while a small CNN
/// separates the classes.
pub fn synthetic_dataset(seed: u64, n_per_class: usize, difficulty: f64) -> Dataset {
    const SIDE: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, difficulty.max(0.0)).expect("finite std");
    let mut inputs = Vec::with_capacity(2 * n_per_class * SIDE * SIDE);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for class in 0..2 {
            let freq = rng.random_range(0.12..0.3) * std::f64::consts::TAU;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let contrast = rng.random_range(0.6..1.2);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let coord = if class == 0 { y } else { x } as f64;
                    let v = contrast * (freq * coord + phase).sin() + noise.sample(&mut rng);
                    inputs.push(v as f32);
                }
            }
            labels.push(class);
        }
    }
    Dataset::from_parts("synthetic", Split::Train, [1, SIDE, SIDE], 2, inputs, labels, seed)
        .expect("consistent by construction")
}

/// Resolves the dataset root from an explicit path or [`DATA_ROOT_ENV`].
pub fn data_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("dataset root not configured; set data.root or {DATA_ROOT_ENV}")))
}

/// Loads a standard dataset split from `root`.
///
/// MNIST reads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `root/mnist`;
/// CIFAR-10 reads `data_batch_{1..5}.bin` / `test_batch.bin` from
/// `root/cifar-10-batches-bin`.
pub fn load_dataset(name: &str, split: Split, root: &Path, norm: &Normalization) -> Result<Dataset> {
    match name {
        "mnist" => load_mnist(&root.join("mnist"), split, norm),
        "cifar10" => load_cifar10(&root.join("cifar-10-batches-bin"), split, norm),
        other => Err(Error::Config(format!("unknown dataset `{other}`"))),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn check_norm(norm: &Normalization, channels: usize) -> Result<()> {
    if norm.mean.len() != channels || norm.std.len() != channels || norm.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Config(format!("normalization needs {channels} means and positive stds")));
    }
    Ok(())
}

fn load_mnist(dir: &Path, split: Split, norm: &Normalization) -> Result<Dataset> {
    check_norm(norm, 1)?;
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let images = read(&img_path)?;
    let labels = read(&lbl_path)?;
    let bad = |p: &Path| Error::Integrity(format!("{} is not a valid idx file", p.display()));
    if images.len() < 16 || be_u32(&images, 0) != 0x0803 {
        return Err(bad(&img_path));
    }
    if labels.len() < 8 || be_u32(&labels, 0) != 0x0801 {
        return Err(bad(&lbl_path));
    }
    let n = be_u32(&images, 4) as usize;
    let (rows, cols) = (be_u32(&images, 8) as usize, be_u32(&images, 12) as usize);
    if images.len() != 16 + n * rows * cols {
        return Err(bad(&img_path));
    }
    if be_u32(&labels, 4) as usize != n || labels.len() != 8 + n {
        return Err(bad(&lbl_path));
    }
    let (m, s) = (norm.mean[0], norm.std[0]);
    let inputs = images[16..].iter().map(|&p| (f32::from(p) / 255.0 - m) / s).collect();
    let labels = labels[8..].iter().map(|&l| l as usize).collect();
    Dataset::from_parts("mnist", split, [1, rows, cols], 10, inputs, labels, 0)
}

fn load_cifar10(dir: &Path, split: Split, norm: &Normalization) -> Result<Dataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    check_norm(norm, 3)?;
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = read(&path)?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Integrity(format!("{} is not a CIFAR-10 batch", path.display())));
        }
        for rec in bytes.chunks_exact(RECORD) {
            labels.push(rec[0] as usize);
            for (i, &p) in rec[1..].iter().enumerate() {
                let c = i / 1024;
                inputs.push((f32::from(p) / 255.0 - norm.mean[c]) / norm.std[c]);
            }
        }
    }
    Dataset::from_parts("cifar10", split, [3, 32, 32], 10, inputs, labels, 0)
}
