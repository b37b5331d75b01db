use rand::seq::SliceRandom;

use crate::data::augment::{apply_affine_into, sample_affine, AugmentConfig};
use crate::data::idx::{RawDataset, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{derive_rng, stream};

const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Maps a byte intensity onto [-1, 1].
#[inline]
pub fn normalize(pixel: f32) -> f32 {
    pixel * (2.0 / 255.0) - 1.0
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `N x 1 x 28 x 28`, normalized.
    pub images: Tensor,
    pub labels: Vec<u8>,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

/// Writes the normalized, optionally augmented sample `index` into `out`.
/// The augmentation draw depends only on `(seed, epoch, index)`.
pub fn prepare_sample(
    dataset: &RawDataset,
    index: usize,
    augment: &AugmentConfig,
    seed: u64,
    epoch: usize,
    out: &mut [f32],
) {
    let raw = dataset.image(index);
    if augment.is_identity() {
        for (o, &p) in out.iter_mut().zip(raw) {
            *o = normalize(p as f32);
        }
        return;
    }
    let mut rng = derive_rng(seed, &[stream::AUGMENT, epoch as u64, index as u64]);
    let params = sample_affine(&mut rng, augment);
    let src: Vec<f32> = raw.iter().map(|&p| p as f32).collect();
    apply_affine_into(&src, params, out);
    out.iter_mut().for_each(|v| *v = normalize(*v));
}

/// Stacks the given samples without augmentation (evaluation path).
pub fn clean_batch(dataset: &RawDataset, indices: &[usize]) -> Batch {
    let mut data = vec![0.0; indices.len() * PIXELS];
    for (chunk, &i) in data.chunks_exact_mut(PIXELS).zip(indices) {
        prepare_sample(dataset, i, &AugmentConfig::disabled(), 0, 0, chunk);
    }
    Batch {
        images: Tensor::new(&[indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("batch shape"),
        labels: indices.iter().map(|&i| dataset.label(i)).collect(),
        indices: indices.to_vec(),
    }
}

/// Per-epoch permutation of the dataset.
pub fn epoch_permutation(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut derive_rng(seed, &[stream::SHUFFLE, epoch as u64]));
    order
}

/// Lazily yields the shuffled, augmented, normalized batches of one epoch.
pub struct EpochBatches<'a> {
    dataset: &'a RawDataset,
    order: Vec<usize>,
    batch_size: usize,
    augment: AugmentConfig,
    seed: u64,
    epoch: usize,
    cursor: usize,
}

impl EpochBatches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;

        let mut data = vec![0.0; indices.len() * PIXELS];
        for (chunk, &i) in data.chunks_exact_mut(PIXELS).zip(&indices) {
            prepare_sample(self.dataset, i, &self.augment, self.seed, self.epoch, chunk);
        }
        Some(Batch {
            images: Tensor::new(&[indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.dataset.label(i)).collect(),
            indices,
        })
    }
}

pub fn make_batches<'a>(
    dataset: &'a RawDataset,
    batch_size: usize,
    augment: AugmentConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochBatches<'a>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(EpochBatches {
        dataset,
        order: epoch_permutation(dataset.len(), seed, epoch),
        batch_size,
        augment,
        seed,
        epoch,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> RawDataset {
        let pixels = (0..n * PIXELS).map(|i| ((i * 7 + i / 784) % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        RawDataset::from_parts(pixels, labels).unwrap()
    }

    #[test]
    fn normalize_endpoints() {
        assert_eq!(normalize(0.0), -1.0);
        assert_eq!(normalize(255.0), 1.0);
        assert!((normalize(51.0) - (-0.6)).abs() < 1e-6);
        let values: Vec<f32> = (0..=255).map(|p| normalize(p as f32)).collect();
        assert!(values.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn remainder_batch_sizes() {
        let ds = synthetic(10);
        let sizes: Vec<usize> = make_batches(&ds, 4, AugmentConfig::default(), 1, 0)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn full_mnist_epoch_has_500_batches() {
        // Only the count matters here; avoid materializing the batches.
        let ds = RawDataset::from_parts(vec![0; 60_000 * PIXELS], vec![0; 60_000]).unwrap();
        assert_eq!(make_batches(&ds, 120, AugmentConfig::default(), 0, 0).unwrap().num_batches(), 500);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = RawDataset::from_parts(vec![], vec![]).unwrap();
        assert!(matches!(make_batches(&ds, 4, AugmentConfig::default(), 0, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn same_seed_same_batches_different_epoch_differs() {
        let ds = synthetic(12);
        let collect = |seed, epoch| -> Vec<Batch> {
            make_batches(&ds, 5, AugmentConfig::default(), seed, epoch).unwrap().collect()
        };
        let a = collect(3, 0);
        let b = collect(3, 0);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
            assert_eq!(x.images, y.images);
        }
        let c = collect(3, 1);
        assert_ne!(a[0].images, c[0].images);
    }

    #[test]
    fn disabled_augmentation_is_shuffle_plus_normalize() {
        let ds = synthetic(9);
        for batch in make_batches(&ds, 4, AugmentConfig::disabled(), 5, 2).unwrap() {
            for (k, &i) in batch.indices.iter().enumerate() {
                let expected: Vec<f32> = ds.image(i).iter().map(|&p| normalize(p as f32)).collect();
                assert_eq!(&batch.images.data()[k * PIXELS..(k + 1) * PIXELS], &expected[..]);
                assert_eq!(batch.labels[k], ds.label(i));
            }
        }
        let mut seen: Vec<usize> = make_batches(&ds, 4, AugmentConfig::disabled(), 5, 2)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
    }
}
