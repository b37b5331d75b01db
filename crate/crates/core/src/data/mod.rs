//! MNIST input pipeline: IDX parsing, augmentation and batching.

pub mod augment;
pub mod batch;
pub mod idx;

pub use augment::{apply_affine, sample_affine, AffineParams, AugmentConfig};
pub use batch::{clean_batch, make_batches, normalize, Batch, EpochBatches};
pub use idx::{parse_idx_images, parse_idx_labels, IdxImages, RawDataset, NUM_CLASSES};

use std::path::PathBuf;

/// Environment variable naming the directory that holds the IDX files.
pub const DATA_DIR_ENV: &str = "SIMPLECNN_DATA";

/// `$SIMPLECNN_DATA` if set, otherwise `data/` at the workspace root.
pub fn data_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}
