//! Datasets: MNIST IDX loading, the even/odd task split, a synthetic
//! two-task generator, a binary cache format and batch loaders.

pub mod fetch;
pub mod idx;
mod synthetic;

pub use synthetic::{SyntheticData, SyntheticTwoTask};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IdxError, Result};
use crate::tensor::Tensor;

/// Images (or feature vectors) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// `(N, ...)`; for MNIST `(N, 1, 28, 28)` with pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// A mini-batch drawn from a [`LabeledSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(IdxError::CountMismatch {
                images: images.shape().first().copied().unwrap_or(0),
                labels: labels.len(),
            }
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(IdxError::LabelRange {
                label,
                index,
                classes,
            }
            .into());
        }
        Ok(LabeledSet {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Rows `idx` (in that order) as a batch.
    pub fn gather(&self, idx: &[usize]) -> Batch {
        let per = self.sample_len();
        let src = self.images.values();
        let mut values = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            values.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Batch {
            images: Tensor::from_parts(shape, values),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples (or all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> LabeledSet {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.gather(&idx);
        LabeledSet {
            images: b.images,
            labels: b.labels,
            classes: self.classes,
        }
    }

    /// Binary cache: `"MTCLSET1"`, then u64 LE ndim, dims, classes, the
    /// labels as u64 LE, and the values as f64 LE.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = b"MTCLSET1".to_vec();
        let shape = self.images.shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.classes as u64).to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        for v in self.images.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid("cache", m.to_string());
        if bytes.len() < 16 || &bytes[..8] != b"MTCLSET1" {
            return Err(bad("bad header"));
        }
        let words = |at: usize| -> Result<u64> {
            bytes
                .get(at..at + 8)
                .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
                .ok_or_else(|| bad("truncated"))
        };
        let ndim = words(8)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(bad("bad rank"));
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|i| words(16 + 8 * i).map(|v| v as usize))
            .collect::<Result<_>>()?;
        let mut pos = 16 + 8 * ndim;
        let classes = words(pos)? as usize;
        pos += 8;
        let n = shape[0];
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("shape overflow"))?;
        let need = n
            .checked_add(numel)
            .and_then(|w| w.checked_mul(8))
            .and_then(|b| b.checked_add(pos))
            .ok_or_else(|| bad("shape overflow"))?;
        if bytes.len() != need {
            return Err(bad("length does not match header"));
        }
        let labels = (0..n)
            .map(|i| words(pos + 8 * i).map(|v| v as usize))
            .collect::<Result<_>>()?;
        pos += 8 * n;
        let values = bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        LabeledSet::new(Tensor::from_parts(shape, values), labels, classes)
    }
}

/// Builds a ten-class set from raw images and labels IDX blobs.
pub fn mnist_from_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    let (count, rows, cols, pixels) = idx::parse_images(images)?;
    let labels = idx::parse_labels(labels)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: labels.len(),
        }
        .into());
    }
    LabeledSet::new(
        Tensor::from_parts(vec![count, 1, rows, cols], pixels),
        labels.into_iter().map(usize::from).collect(),
        10,
    )
}

/// Loads an MNIST split from `dir` (`train` or `t10k` file pair, raw IDX).
pub fn load_mnist(dir: &Path, train: bool) -> Result<LabeledSet> {
    let prefix = if train { "train" } else { "t10k" };
    let read = |name: String| -> Result<Vec<u8>> {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    mnist_from_bytes(
        &read(format!("{prefix}-images-idx3-ubyte"))?,
        &read(format!("{prefix}-labels-idx1-ubyte"))?,
    )
}

/// Two tasks built from a ten-digit set: even digits and odd digits, each
/// relabelled to five classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub tasks: Vec<LabeledSet>,
    /// `(digit, task, class)` for every digit 0..10.
    pub mapping: Vec<(usize, usize, usize)>,
}

/// Even digits map to task 0 with class `d / 2`; odd digits to task 1 with
/// class `(d - 1) / 2`.
pub fn digit_to_task(digit: usize) -> (usize, usize) {
    (digit % 2, digit / 2)
}

pub fn split_even_odd(set: &LabeledSet) -> Result<TaskSplit> {
    if let Some((index, &label)) = set.labels.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(IdxError::LabelRange {
            label,
            index,
            classes: 10,
        }
        .into());
    }
    let mut idx = [Vec::new(), Vec::new()];
    for (i, &d) in set.labels.iter().enumerate() {
        idx[d % 2].push(i);
    }
    let tasks = idx
        .iter()
        .map(|rows| {
            let b = set.gather(rows);
            LabeledSet {
                images: b.images,
                labels: b.labels.iter().map(|&d| digit_to_task(d).1).collect(),
                classes: 5,
            }
        })
        .collect();
    let mapping = (0..10)
        .map(|d| {
            let (t, c) = digit_to_task(d);
            (d, t, c)
        })
        .collect();
    Ok(TaskSplit { tasks, mapping })
}

/// Cycles through a dataset in seeded shuffled epochs.
#[derive(Debug, Clone)]
pub struct Loader {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Loader {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::invalid("loader", "empty dataset or zero batch size"));
        }
        let mut l = Loader {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            batch_size: batch_size.min(len),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        l.order.shuffle(&mut l.rng);
        Ok(l)
    }

    /// Indices of the next batch. An epoch's tail shorter than a full batch
    /// is dropped and a fresh permutation starts.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

/// Per-task training sets with independent loaders.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub sets: Vec<LabeledSet>,
    loaders: Vec<Loader>,
    probe: Option<usize>,
}

impl TaskData {
    /// Loader for task `t` is seeded with `seed + t`.
    pub fn new(sets: Vec<LabeledSet>, batch_size: usize, seed: u64) -> Result<Self> {
        let loaders = sets
            .iter()
            .enumerate()
            .map(|(t, s)| Loader::new(s.len(), batch_size, seed.wrapping_add(t as u64)))
            .collect::<Result<_>>()?;
        Ok(TaskData {
            sets,
            loaders,
            probe: None,
        })
    }

    /// Measures negative transfer on the first `n` training samples of each
    /// task instead of on a training batch.
    pub fn with_probe(mut self, n: usize) -> Self {
        self.probe = Some(n);
        self
    }

    pub fn probe_batch(&self, task: usize) -> Option<Batch> {
        let n = self.probe?.min(self.sets[task].len());
        Some(self.sets[task].gather(&(0..n).collect::<Vec<_>>()))
    }

    pub fn next_batch(&mut self, task: usize) -> Batch {
        let idx = self.loaders[task].next_indices();
        self.sets[task].gather(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[usize]) -> LabeledSet {
        let n = labels.len();
        let values = (0..n * 4).map(|i| i as f64 / 100.0).collect();
        LabeledSet::new(
            Tensor::from_parts(vec![n, 1, 2, 2], values),
            labels.to_vec(),
            10,
        )
        .unwrap()
    }

    #[test]
    fn digit_mapping() {
        assert_eq!(digit_to_task(8), (0, 4));
        assert_eq!(digit_to_task(7), (1, 3));
    }

    #[test]
    fn even_odd_partition() {
        let set = toy(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 8, 7]);
        let split = split_even_odd(&set).unwrap();
        assert_eq!(split.tasks[0].len() + split.tasks[1].len(), set.len());
        assert_eq!(split.tasks[0].labels, vec![0, 1, 2, 3, 4, 4]);
        assert_eq!(split.tasks[1].labels, vec![0, 1, 2, 3, 4, 3]);
        // image of digit 8 at index 10 is the sixth even image
        assert_eq!(
            split.tasks[0].images.values()[20..24],
            set.images.values()[40..44]
        );
    }

    #[test]
    fn split_rejects_bad_labels() {
        let mut set = toy(&[0, 1]);
        set.labels[1] = 10;
        assert!(split_even_odd(&set).is_err());
    }

    #[test]
    fn loader_is_seed_deterministic_and_cycles() {
        let mut a = Loader::new(10, 3, 5).unwrap();
        let mut b = Loader::new(10, 3, 5).unwrap();
        let mut seen = Vec::new();
        for _ in 0..3 {
            let x = a.next_indices();
            assert_eq!(x, b.next_indices());
            seen.extend(x);
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        a.next_indices();
        assert_eq!(a.epoch(), 1);
    }

    #[test]
    fn cache_rejects_corruption() {
        let set = toy(&[1, 2, 3]);
        let bytes = set.to_cache_bytes();
        assert_eq!(LabeledSet::from_cache_bytes(&bytes).unwrap(), set);
        assert!(LabeledSet::from_cache_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn probe_is_fixed_head_of_training_set() {
        let data = TaskData::new(vec![toy(&[1, 2, 3]), toy(&[4, 5, 6, 7])], 2, 0).unwrap();
        assert!(data.probe_batch(1).is_none());
        let mut data = data.with_probe(3);
        let p = data.probe_batch(1).unwrap();
        assert_eq!(p.labels, vec![4, 5, 6]);
        data.next_batch(1);
        assert_eq!(data.probe_batch(1).unwrap(), p);
        assert_eq!(
            data.clone().with_probe(99).probe_batch(0).unwrap().labels,
            vec![1, 2, 3]
        );
    }
}
