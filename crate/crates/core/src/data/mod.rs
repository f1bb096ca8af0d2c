//! Datasets, file loaders, batching and augmentation.

mod augment;
mod cifar;
mod idx;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::shuffle_rng;
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment, hflip, AugmentFlags};
pub use cifar::{load_cifar10_bin, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, write_idx};

/// Labelled samples stored as `N × sample_shape` in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.dim(0) != labels.len() {
            return Err(dim_err!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Same data with at least `classes` classes (loaders infer the count
    /// from the largest label seen).
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if classes < self.classes {
            return Err(config_err!("dataset has {} classes, cannot shrink to {classes}", self.classes));
        }
        self.classes = classes;
        Ok(self)
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(config_err!("cannot take {n} of {} samples", self.len()));
        }
        let row = self.images.row_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset::new(
            Tensor::new(&shape, self.images.data()[..n * row].to_vec())?,
            self.labels[..n].to_vec(),
            self.classes,
        )
    }

    /// The first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(config_err!("cannot split {} samples at {n}", self.len()));
        }
        let rest: Vec<usize> = (n..self.len()).collect();
        let (x, y) = self.batch::<f32>(&rest)?;
        Ok((self.head(n)?, Dataset::new(x, y, self.classes)?))
    }

    /// Gathers `indices` into a batch of precision `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(dim_err!("sample index {i} out of range for {} samples", self.len()));
            }
            data.extend(self.images.outer(i).iter().map(|&v| T::from_f32(v).expect("f32 converts")));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(&shape, data)?, labels))
    }

    /// Per-channel `(x − mean) / std`, channels along axis 1.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let channels = self.images.dim(1);
        if mean.len() != channels || std.len() != channels {
            return Err(config_err!(
                "normalization needs {channels} means and stds, got {} and {}",
                mean.len(),
                std.len()
            ));
        }
        if std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(config_err!("normalization std must be positive"));
        }
        let plane = self.images.row_len() / channels;
        for (i, chunk) in self.images.data_mut().chunks_exact_mut(plane).enumerate() {
            let c = i % channels;
            for v in chunk {
                *v = ((*v as f64 - mean[c]) / std[c]) as f32;
            }
        }
        Ok(())
    }
}

/// Gaussian clusters with unit noise. Class `c` is centred at distance
/// `separation / √2` from the origin along its own axis (random unit
/// directions when there are fewer dimensions than classes), so centres
/// sit `separation` apart. Labels cycle `0, 1, …, classes−1`.
pub fn synthetic_blobs(n: usize, classes: usize, shape: &[usize], separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(config_err!("synthetic blobs need at least two classes, got {classes}"));
    }
    if n == 0 || shape.is_empty() || shape.contains(&0) {
        return Err(config_err!("synthetic blobs need n > 0 and a non-empty shape"));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(config_err!("separation must be finite and non-negative"));
    }
    let dims: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if dims >= classes {
                (0..dims).map(|d| if d == c { radius } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| radius * x / norm).collect()
            }
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * dims);
    for &y in &labels {
        for &mu in &centres[y] {
            data.push((mu + rng.sample::<f64, _>(StandardNormal)) as f32);
        }
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(shape);
    Dataset::new(Tensor::new(&full_shape, data)?, labels, classes)
}

/// Index batches of one epoch. With `shuffle`, the order is a pure
/// function of `(seed, epoch)`; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(config_err!("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut shuffle_rng(seed, epoch));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded_and_labelled() {
        let a = synthetic_blobs(40, 4, &[6], 5.0, 3).unwrap();
        assert_eq!(a, synthetic_blobs(40, 4, &[6], 5.0, 3).unwrap());
        assert_ne!(a, synthetic_blobs(40, 4, &[6], 5.0, 4).unwrap());
        let one_each = synthetic_blobs(5, 5, &[2], 1.0, 0).unwrap();
        let mut labels = one_each.labels().to_vec();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        assert!(matches!(synthetic_blobs(10, 1, &[2], 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn blob_centres_are_separated() {
        let d = synthetic_blobs(4000, 2, &[3], 10.0, 1).unwrap();
        let mut mean = [[0.0f64; 3]; 2];
        for i in 0..d.len() {
            for (k, &v) in d.images().outer(i).iter().enumerate() {
                mean[d.labels()[i]][k] += v as f64 / 2000.0;
            }
        }
        let dist = (0..3).map(|k| (mean[0][k] - mean[1][k]).powi(2)).sum::<f64>().sqrt();
        assert!((dist - 10.0).abs() < 0.2, "{dist}");
    }

    #[test]
    fn epoch_batches_partition_indices() {
        let batches = epoch_batches(103, 10, 7, 2, true).unwrap();
        assert_eq!(batches.len(), 11);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut all: Vec<usize> = batches.concat();
        assert_ne!(all, (0..103).collect::<Vec<_>>());
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(batches, epoch_batches(103, 10, 7, 2, true).unwrap());
        assert_ne!(batches, epoch_batches(103, 10, 7, 3, true).unwrap());
        assert_eq!(epoch_batches(4, 3, 0, 0, false).unwrap(), vec![vec![0, 1, 2], vec![3]]);
        assert!(epoch_batches(4, 0, 0, 0, false).is_err());
    }

    #[test]
    fn batch_and_head() {
        let d = synthetic_blobs(10, 2, &[1, 2, 2], 1.0, 0).unwrap();
        let (x, y) = d.batch::<f64>(&[3, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(y, vec![1, 0]);
        assert_eq!(x.data()[0], d.images().outer(3)[0] as f64);
        assert!(d.batch::<f32>(&[10]).is_err());
        assert_eq!(d.head(4).unwrap().len(), 4);
        assert!(d.head(11).is_err());
        let (a, b) = d.split_at(7).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(b.images().outer(0), d.images().outer(7));
        assert!(d.split_at(10).is_err());
    }

    #[test]
    fn normalization_per_channel() {
        let images = Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let mut d = Dataset::new(images, vec![0], 2).unwrap();
        d.normalize(&[1.0, 10.0], &[2.0, 5.0]).unwrap();
        assert_eq!(d.images().data(), &[0.0, 1.0, 0.0, 2.0]);
        assert!(d.normalize(&[0.0], &[1.0]).is_err());
        assert!(d.normalize(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn labels_are_checked() {
        let images = Tensor::zeros(&[2, 3]).unwrap();
        assert!(Dataset::new(images.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(images, vec![0], 2).is_err());
    }
}
