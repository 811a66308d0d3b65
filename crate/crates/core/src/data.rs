//! Task construction: synthetic Gaussian-cluster tasks, class-disjoint splits,
//! episodic class sampling, minibatches, and the CIFAR-10 binary format.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// Labelled examples. `labels[i]` indexes into `classes`, which holds the original class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: Vec<usize>,
    pub split: SplitTag,
}

/// Train and test halves of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: Vec<usize>, split: SplitTag) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Data(format!("label {bad} outside {} classes", classes.len())));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
            split: self.split,
        }
    }

    /// Reinterprets each example with a new shape of equal size (e.g. vectors as images).
    pub fn reshape_examples(&self, shape: &[usize]) -> Result<Dataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Dataset {
            inputs: self.inputs.reshape(&full)?,
            ..self.clone()
        })
    }
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub classes: usize,
    /// Minimum pairwise distance between cluster centres (unit-variance clusters).
    pub margin: f64,
}

/// Unit-variance Gaussian clusters around random directions, scaled so every pair of
/// centres is at least `margin` apart. Labels are cluster indices.
pub fn synthetic_tasks(seed: u64, spec: &SyntheticSpec) -> Result<TaskData> {
    if spec.classes < 2 {
        return Err(Error::Data("synthetic task needs at least 2 classes".into()));
    }
    if !(spec.margin >= 0.0) || spec.dim == 0 || spec.n_train_per_class == 0 || spec.n_test_per_class == 0 {
        return Err(Error::Data(format!("invalid synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim;
    let dirs: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..dirs.len() {
        for b in a + 1..dirs.len() {
            let dist = dirs[a]
                .iter()
                .zip(&dirs[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    let radius = if spec.margin == 0.0 {
        0.0
    } else {
        spec.margin / min_dist.max(1e-12)
    };
    let draw = |per_class: usize, split: SplitTag, rng: &mut ChaCha8Rng| {
        let n = per_class * spec.classes;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (c, dir) in dirs.iter().enumerate() {
            for _ in 0..per_class {
                for u in dir {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(radius * u + z);
                }
                labels.push(c);
            }
        }
        Dataset::new(
            Tensor::from_raw(vec![n, d], data),
            labels,
            (0..spec.classes).collect(),
            split,
        )
    };
    let train = draw(spec.n_train_per_class, SplitTag::Train, &mut rng)?;
    let test = draw(spec.n_test_per_class, SplitTag::Test, &mut rng)?;
    Ok(TaskData { train, test })
}

/// Per-task datasets for disjoint class groups. Labels are remapped to positions within each
/// group (in the group's listed order); original class ids are kept in `classes`.
pub fn split_classes(dataset: &Dataset, partition: &[Vec<usize>]) -> Result<Vec<Dataset>> {
    let mut seen = BTreeSet::new();
    for group in partition {
        if group.is_empty() {
            return Err(Error::Data("empty class group in partition".into()));
        }
        for c in group {
            if !seen.insert(*c) {
                return Err(Error::Data(format!("class {c} appears in two task groups")));
            }
            if !dataset.classes.contains(c) {
                return Err(Error::Data(format!("class {c} not present in dataset")));
            }
        }
    }
    partition
        .iter()
        .map(|group| {
            let mut idx = Vec::new();
            let mut labels = Vec::new();
            for (i, &l) in dataset.labels.iter().enumerate() {
                let orig = dataset.classes[l];
                if let Some(pos) = group.iter().position(|&c| c == orig) {
                    idx.push(i);
                    labels.push(pos);
                }
            }
            if idx.is_empty() {
                return Err(Error::Data(format!("no examples for classes {group:?}")));
            }
            Dataset::new(dataset.inputs.select_rows(&idx), labels, group.clone(), dataset.split)
        })
        .collect()
}

pub fn split_task(task: &TaskData, partition: &[Vec<usize>]) -> Result<Vec<TaskData>> {
    let train = split_classes(&task.train, partition)?;
    let test = split_classes(&task.test, partition)?;
    Ok(train
        .into_iter()
        .zip(test)
        .map(|(train, test)| TaskData { train, test })
        .collect())
}

/// Uniform draw of `k` distinct classes from `pool`, in draw order.
pub fn sample_classes(pool: &[usize], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k == 0 || k > pool.len() {
        return Err(Error::Data(format!("cannot draw {k} classes from a pool of {}", pool.len())));
    }
    Ok(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
}

/// A `k`-class task drawn uniformly from `pool` (deterministic in `seed`).
pub fn sample_episode_task(source: &TaskData, pool: &[usize], k: usize, seed: u64) -> Result<TaskData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = sample_classes(pool, k, &mut rng)?;
    Ok(split_task(source, &[classes])?.remove(0))
}

/// Splits examples into two halves, alternating within each class, so both halves keep the
/// class balance and share no example.
pub fn halve_examples(dataset: &Dataset) -> (Dataset, Dataset) {
    let mut count = vec![0usize; dataset.num_classes()];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, &l) in dataset.labels.iter().enumerate() {
        if count[l] % 2 == 0 {
            a.push(i);
        } else {
            b.push(i);
        }
        count[l] += 1;
    }
    (dataset.subset(&a), dataset.subset(&b))
}

/// A sampled minibatch with the indices it was drawn from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    /// FNV-1a over the drawn indices; equal hashes mean equal batches for one dataset.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &i in &self.indices {
            for b in (i as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Concatenates two batches (rows of `self` first). Labels are passed through unchanged.
    pub fn join(&self, other: &Batch) -> Result<Batch> {
        Ok(Batch {
            inputs: Tensor::cat_rows(&[&self.inputs, &other.inputs])?,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            indices: self.indices.iter().chain(&other.indices).copied().collect(),
        })
    }
}

/// `size` distinct examples drawn uniformly.
pub fn minibatch(dataset: &Dataset, size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if size == 0 || size > dataset.len() {
        return Err(Error::Data(format!(
            "batch of {size} from a dataset of {}",
            dataset.len()
        )));
    }
    let indices = sample(rng, dataset.len(), size).into_vec();
    Ok(Batch {
        inputs: dataset.inputs.select_rows(&indices),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        indices,
    })
}

/// A full pass over `dataset` in random order.
pub fn shuffled(dataset: &Dataset, rng: &mut impl Rng) -> Batch {
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(rng);
    Batch {
        inputs: dataset.inputs.select_rows(&indices),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        indices,
    }
}

/// Parses CIFAR-10 binary records: one label byte, then 1024 R, 1024 G, 1024 B bytes
/// (row-major 32x32). Pixels are scaled to `[0, 1]`; no standardization is applied here.
pub fn parse_cifar10_binary(bytes: &[u8], split: SplitTag) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {r}: label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(
        Tensor::from_raw(vec![n, 3, 32, 32], data),
        labels,
        (0..10).collect(),
        split,
    )
}

pub fn load_cifar10_binary(path: impl AsRef<Path>, split: SplitTag) -> Result<Dataset> {
    parse_cifar10_binary(&std::fs::read(path)?, split)
}

/// Inverse of [`parse_cifar10_binary`] for unstandardized datasets with original class ids.
pub fn encode_cifar10_binary(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.example_shape() != [3, 32, 32] {
        return Err(Error::Format(format!(
            "expected 3x32x32 examples, got {:?}",
            dataset.example_shape()
        )));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &l) in dataset.labels.iter().enumerate() {
        let class = dataset.classes[l];
        if class > 9 {
            return Err(Error::Format(format!("class id {class} > 9")));
        }
        out.push(class as u8);
        for &v in dataset.inputs.row(i) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!("pixel {v} outside [0, 1]")));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Per-channel standardization constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits channel statistics on `[n, c, ...]` inputs (or per feature for `[n, d]`).
    pub fn fit(dataset: &Dataset) -> Self {
        let shape = dataset.inputs.shape();
        let c = shape[1];
        let per: usize = shape[2..].iter().product();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (k, v) in dataset.inputs.data().iter().enumerate() {
            let ch = k / per % c;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        let count = (dataset.len() * per) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let shape = dataset.inputs.shape();
        let c = shape[1];
        let per: usize = shape[2..].iter().product();
        let data = dataset
            .inputs
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let ch = k / per % c;
                (v - self.mean[ch]) / self.std[ch]
            })
            .collect();
        Dataset {
            inputs: Tensor::from_raw(shape.to_vec(), data),
            ..dataset.clone()
        }
    }
}
