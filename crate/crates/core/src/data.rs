//! CIFAR-10 / CIFAR-100 binary ingestion, normalization and batching.
//!
//! Expected files (either directly in the data directory or in the
//! sub-directory the official archive unpacks to):
//!
//! | dataset   | sub-directory          | files                                  | record |
//! |-----------|------------------------|----------------------------------------|--------|
//! | CIFAR-10  | `cifar-10-batches-bin` | `data_batch_1.bin` … `data_batch_5.bin`, `test_batch.bin` | 3073 B |
//! | CIFAR-100 | `cifar-100-binary`     | `train.bin`, `test.bin`                | 3074 B |
//!
//! A CIFAR-10 record is one label byte followed by 3072 pixel bytes (R plane,
//! G plane, B plane, each 32×32 row-major). CIFAR-100 records carry a coarse
//! label byte then a fine label byte; the fine label is the class target.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CHANNELS, IMAGE_SIDE};
use crate::tensor::{Real, Tensor};

pub const PIXELS: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;
const RECORDS_PER_CIFAR10_FILE: usize = 10_000;
const CIFAR10_TRAIN_FILES: usize = 5;
const CIFAR100_TRAIN_RECORDS: usize = 50_000;
const CIFAR100_TEST_RECORDS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn n_classes(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    fn label_bytes(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 1,
            DatasetKind::Cifar100 => 2,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
        }
    }

    /// `(file name, record count)` for each file of a split, in load order.
    pub fn files(self, split: Split) -> Vec<(String, usize)> {
        match (self, split) {
            (DatasetKind::Cifar10, Split::Train) => (1..=CIFAR10_TRAIN_FILES)
                .map(|i| (format!("data_batch_{i}.bin"), RECORDS_PER_CIFAR10_FILE))
                .collect(),
            (DatasetKind::Cifar10, Split::Test) => {
                vec![("test_batch.bin".into(), RECORDS_PER_CIFAR10_FILE)]
            }
            (DatasetKind::Cifar100, Split::Train) => vec![("train.bin".into(), CIFAR100_TRAIN_RECORDS)],
            (DatasetKind::Cifar100, Split::Test) => vec![("test.bin".into(), CIFAR100_TEST_RECORDS)],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            other => Err(Error::Config(format!("unknown dataset `{other}` (cifar10 or cifar100)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One split of a CIFAR dataset, pixels kept as raw bytes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    images: Vec<u8>,
    labels: Vec<u8>,
    coarse_labels: Option<Vec<u8>>,
}

impl Dataset {
    /// Assemble from in-memory parts (`images` is `n × 3072` bytes).
    pub fn from_parts(kind: DatasetKind, split: Split, images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * PIXELS {
            return Err(Error::Contract(format!(
                "{} image bytes for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= kind.n_classes()) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: kind.n_classes(),
            });
        }
        let coarse_labels = (kind == DatasetKind::Cifar100).then(|| vec![0; labels.len()]);
        Ok(Self {
            kind,
            split,
            images,
            labels,
            coarse_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.kind.n_classes()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes()];
        for l in self.labels() {
            h[l] += 1;
        }
        h
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            kind: self.kind,
            split: self.split,
            images: self.images[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
            coarse_labels: self.coarse_labels.as_ref().map(|c| c[..n].to_vec()),
        }
    }

    /// Re-encode into the canonical file layout: `(file name, bytes)` per file.
    pub fn to_files(&self) -> Vec<(String, Vec<u8>)> {
        let rec = self.kind.record_len();
        let mut files = Vec::new();
        let mut start = 0;
        for (name, count) in self.kind.files(self.split) {
            let count = count.min(self.len() - start);
            let mut bytes = Vec::with_capacity(count * rec);
            for i in start..start + count {
                if let Some(coarse) = &self.coarse_labels {
                    bytes.push(coarse[i]);
                }
                bytes.push(self.labels[i]);
                bytes.extend_from_slice(self.image_bytes(i));
            }
            files.push((name, bytes));
            start += count;
            if start == self.len() {
                break;
            }
        }
        files
    }

    /// Write the canonical files into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (name, bytes) in self.to_files() {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }
}

fn resolve_dir(dir: &Path, kind: DatasetKind) -> PathBuf {
    let nested = dir.join(kind.subdir());
    let probe = &kind.files(Split::Test)[0].0;
    if !dir.join(probe).exists() && nested.join(probe).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn load_split(dir: &Path, kind: DatasetKind, split: Split) -> Result<Dataset> {
    let rec = kind.record_len();
    let lb = kind.label_bytes();
    let classes = kind.n_classes();
    let files = kind.files(split);
    let total: usize = files.iter().map(|(_, n)| n).sum();
    let mut images = Vec::with_capacity(total * PIXELS);
    let mut labels = Vec::with_capacity(total);
    let mut coarse = (kind == DatasetKind::Cifar100).then(|| Vec::with_capacity(total));
    for (name, records) in files {
        let path = dir.join(&name);
        if !path.is_file() {
            return Err(Error::MissingData(path));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let expected = records * rec;
        if bytes.len() != expected {
            return Err(Error::CorruptData {
                path,
                detail: format!("expected {expected} bytes ({records} records of {rec}), found {}", bytes.len()),
            });
        }
        for (i, record) in bytes.chunks_exact(rec).enumerate() {
            let label = record[lb - 1];
            if label as usize >= classes {
                return Err(Error::CorruptData {
                    path,
                    detail: format!("label byte {label} >= {classes} at offset {}", i * rec + lb - 1),
                });
            }
            if let Some(c) = coarse.as_mut() {
                c.push(record[0]);
            }
            labels.push(label);
            images.extend_from_slice(&record[lb..]);
        }
    }
    Ok(Dataset {
        kind,
        split,
        images,
        labels,
        coarse_labels: coarse,
    })
}

/// Load `(train, test)` for a dataset kind.
pub fn load(kind: DatasetKind, dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, kind);
    Ok((load_split(&dir, kind, Split::Train)?, load_split(&dir, kind, Split::Test)?))
}

pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load(DatasetKind::Cifar10, dir)
}

pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    load(DatasetKind::Cifar100, dir)
}

/// Per-channel mean and standard deviation of `pixel / 255`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    /// Population statistics over every pixel of `dataset` (the train split).
    pub fn compute(dataset: &Dataset) -> Self {
        let mut sum = [0u64; CHANNELS];
        let mut sum_sq = [0u64; CHANNELS];
        for i in 0..dataset.len() {
            let img = dataset.image_bytes(i);
            for c in 0..CHANNELS {
                for &p in &img[c * PLANE..(c + 1) * PLANE] {
                    sum[c] += p as u64;
                    sum_sq[c] += (p as u64) * (p as u64);
                }
            }
        }
        let n = (dataset.len() * PLANE) as f64;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            let m = sum[c] as f64 / n;
            let var = sum_sq[c] as f64 / n - m * m;
            mean[c] = m / 255.0;
            std[c] = var.max(0.0).sqrt() / 255.0;
        }
        Self { mean, std }
    }

    /// `(x/255 − μ_c) / σ_c` for one `[3, 32, 32]` byte image.
    pub fn normalize_into<T: Real>(&self, pixels: &[u8], out: &mut [T]) {
        for c in 0..CHANNELS {
            let scale = 1.0 / (255.0 * self.std[c].max(1e-12));
            let shift = self.mean[c] / self.std[c].max(1e-12);
            for (o, &p) in out[c * PLANE..(c + 1) * PLANE]
                .iter_mut()
                .zip(&pixels[c * PLANE..(c + 1) * PLANE])
            {
                *o = T::from_f64(p as f64 * scale - shift);
            }
        }
    }

    /// Normalize `n` concatenated byte images into a `[n, 3, 32, 32]` tensor.
    pub fn normalize<T: Real>(&self, images_u8: &[u8]) -> Result<Tensor<T>> {
        if images_u8.is_empty() || !images_u8.len().is_multiple_of(PIXELS) {
            return Err(Error::Contract(format!(
                "{} bytes is not a whole number of 32x32x3 images",
                images_u8.len()
            )));
        }
        let n = images_u8.len() / PIXELS;
        let mut data = vec![T::ZERO; images_u8.len()];
        for i in 0..n {
            self.normalize_into(&images_u8[i * PIXELS..(i + 1) * PIXELS], &mut data[i * PIXELS..(i + 1) * PIXELS]);
        }
        Tensor::new(&[n, CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)
    }
}

/// Sample order for one epoch. Train order is a seeded permutation that
/// depends only on `(seed, epoch)`; the identity otherwise.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Iterator of normalized batches over a dataset in a fixed order; the last
/// batch may be short.
pub struct Batches<'a, T> {
    dataset: &'a Dataset,
    stats: &'a ChannelStats,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T: Real> Batches<'a, T> {
    pub fn new(dataset: &'a Dataset, stats: &'a ChannelStats, order: Vec<usize>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            dataset,
            stats,
            order,
            batch_size,
            pos: 0,
            _marker: std::marker::PhantomData,
        })
    }

    /// Shuffled for the train split, sequential for the test split.
    pub fn for_epoch(
        dataset: &'a Dataset,
        stats: &'a ChannelStats,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        let order = epoch_order(dataset.len(), seed, epoch, dataset.split == Split::Train);
        Self::new(dataset, stats, order, batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<T: Real> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut data = vec![T::ZERO; idx.len() * PIXELS];
        for (slot, &i) in idx.iter().enumerate() {
            self.stats
                .normalize_into(self.dataset.image_bytes(i), &mut data[slot * PIXELS..(slot + 1) * PIXELS]);
        }
        let images = Tensor::new(&[idx.len(), CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)
            .expect("batch buffer sized from index count");
        Some(Batch {
            images,
            labels: idx.iter().map(|&i| self.dataset.label(i)).collect(),
        })
    }
}

/// Drive `consume` over `items` while a background thread prepares the next
/// item (a single-slot producer/consumer queue).
pub fn for_each_prefetched<I, F>(items: I, mut consume: F) -> Result<()>
where
    I: Iterator + Send,
    I::Item: Send,
    F: FnMut(I::Item) -> Result<()>,
{
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel(1);
        scope.spawn(move || {
            for item in items {
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        for item in rx {
            consume(item)?;
        }
        Ok(())
    })
}

/// Deterministic stand-in data in the CIFAR layout: each class has its own
/// mean colour plus uniform noise. Used by smoke tests when the real archive
/// is not available.
pub fn synthetic(kind: DatasetKind, split: Split, n: usize, seed: u64) -> Dataset {
    let classes = kind.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if split == Split::Train { 0 } else { 0x5eed });
    let palette: Vec<[f64; CHANNELS]> = {
        let mut prng = ChaCha8Rng::seed_from_u64(0xc1fa);
        (0..classes)
            .map(|_| [prng.gen_range(40.0..215.0), prng.gen_range(40.0..215.0), prng.gen_range(40.0..215.0)])
            .collect()
    };
    let mut labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(n * PIXELS);
    for &l in &labels {
        for &base in &palette[l as usize] {
            for _ in 0..PLANE {
                let v: f64 = base + rng.gen_range(-40.0..40.0);
                images.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    let coarse_labels = (kind == DatasetKind::Cifar100).then(|| labels.iter().map(|l| l / 5).collect());
    Dataset {
        kind,
        split,
        images,
        labels,
        coarse_labels,
    }
}

/// Write a full-size synthetic copy of a dataset (both splits) to `dir`.
pub fn write_synthetic(kind: DatasetKind, dir: &Path, seed: u64) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let n = kind.files(split).iter().map(|(_, c)| c).sum();
        synthetic(kind, split, n, seed).write_to(dir)?;
    }
    Ok(())
}
