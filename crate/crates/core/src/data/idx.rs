//! IDX container parsing (the MNIST file format).
//!
//! ```text
//! images: 0x00000803 | count u32 | rows u32 | cols u32 | count*rows*cols u8
//! labels: 0x00000801 | count u32 | count u8
//! ```
//! All header integers are big-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Raw image block as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `count * rows * cols` bytes.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, index: usize) -> &[u8] {
        let len = self.rows * self.cols;
        &self.pixels[index * len..(index + 1) * len]
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(Error::Truncated {
        needed: offset + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::WrongMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX image file. With `strict` set, anything other than 28x28 is
/// rejected with `BadDims`.
pub fn parse_idx_images(bytes: &[u8], strict: bool) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if strict && (rows != IMAGE_SIDE || cols != IMAGE_SIDE) {
        return Err(Error::BadDims { rows, cols });
    }
    let payload = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(Error::Truncated { needed: usize::MAX, available: bytes.len() })?;
    let needed = 16 + payload;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, available: bytes.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..needed].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, available: bytes.len() });
    }
    let labels = bytes[8..needed].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
        return Err(Error::BadLabel { index, label });
    }
    Ok(labels)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for dim in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Paired 28x28 images and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl RawDataset {
    pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

    pub fn new(images: IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.rows != IMAGE_SIDE || images.cols != IMAGE_SIDE {
            return Err(Error::BadDims { rows: images.rows, cols: images.cols });
        }
        if images.count != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
            return Err(Error::BadLabel { index, label });
        }
        Ok(Self { images: images.pixels, labels })
    }

    /// Builds a dataset directly from flat pixel bytes (`len * 784`).
    pub fn from_parts(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let count = labels.len();
        if images.len() != count * Self::PIXELS {
            return Err(Error::shape(format!(
                "{} pixel bytes for {} labels",
                images.len(),
                count
            )));
        }
        Self::new(IdxImages { count, rows: IMAGE_SIDE, cols: IMAGE_SIDE, pixels: images }, labels)
    }

    pub fn load(image_path: &Path, label_path: &Path) -> Result<Self> {
        let image_bytes = fs::read(image_path)
            .map_err(|e| Error::io(format!("reading {}", image_path.display()), e))?;
        let label_bytes = fs::read(label_path)
            .map_err(|e| Error::io(format!("reading {}", label_path.display()), e))?;
        Self::new(parse_idx_images(&image_bytes, true)?, parse_idx_labels(&label_bytes)?)
    }

    pub fn load_train(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))
    }

    pub fn load_test(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[u8] {
        &self.images[index * Self::PIXELS..(index + 1) * Self::PIXELS]
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.images
    }

    /// First `n` samples (or all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * Self::PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn to_idx(&self) -> (Vec<u8>, Vec<u8>) {
        let images = IdxImages {
            count: self.len(),
            rows: IMAGE_SIDE,
            cols: IMAGE_SIDE,
            pixels: self.images.clone(),
        };
        (encode_idx_images(&images), encode_idx_labels(&self.labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_built_image_file() {
        let bytes = [
            0x00, 0x00, 0x08, 0x03, // magic
            0, 0, 0, 1, // count
            0, 0, 0, 2, // rows
            0, 0, 0, 2, // cols
            0, 255, 10, 20,
        ];
        assert_eq!(bytes.len(), 20);
        let images = parse_idx_images(&bytes, false).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (1, 2, 2));
        assert_eq!(images.pixels, vec![0, 255, 10, 20]);
        assert_eq!(images.image(0), &[0, 255, 10, 20]);
    }

    #[test]
    fn trailing_bytes_are_not_consumed() {
        let mut bytes = encode_idx_images(&IdxImages { count: 1, rows: 1, cols: 2, pixels: vec![3, 4] });
        bytes.extend_from_slice(&[9, 9, 9]);
        assert_eq!(parse_idx_images(&bytes, false).unwrap().pixels, vec![3, 4]);
    }

    #[test]
    fn label_file_round_trip_and_errors() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 5, 0, 9];
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![5, 0, 9]);

        let bad = [0, 0, 8, 1, 0, 0, 0, 2, 5, 12];
        assert!(matches!(parse_idx_labels(&bad), Err(Error::BadLabel { index: 1, label: 12 })));

        let short = [0, 0, 8, 1, 0, 0, 0, 4, 1, 2];
        assert!(matches!(
            parse_idx_labels(&short),
            Err(Error::Truncated { needed: 12, available: 10 })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let labels = encode_idx_labels(&[1, 2]);
        assert!(matches!(
            parse_idx_images(&labels, false),
            Err(Error::WrongMagic { expected: IMAGE_MAGIC, found: LABEL_MAGIC })
        ));
        let images = encode_idx_images(&IdxImages { count: 0, rows: 28, cols: 28, pixels: vec![] });
        assert!(matches!(parse_idx_labels(&images), Err(Error::WrongMagic { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn truncated_and_strict_dims() {
        let mut bytes = encode_idx_images(&IdxImages { count: 2, rows: 2, cols: 2, pixels: vec![1; 8] });
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(parse_idx_images(&bytes, false), Err(Error::Truncated { needed: 24, available: 23 })));

        let small = encode_idx_images(&IdxImages { count: 1, rows: 2, cols: 2, pixels: vec![1; 4] });
        assert!(matches!(parse_idx_images(&small, true), Err(Error::BadDims { rows: 2, cols: 2 })));
        assert!(parse_idx_images(&small, false).is_ok());
    }

    #[test]
    fn dataset_invariants() {
        assert!(RawDataset::from_parts(vec![0; 784 * 2], vec![1]).is_err());
        assert!(matches!(
            RawDataset::from_parts(vec![0; 784], vec![10]),
            Err(Error::BadLabel { .. })
        ));
        let ds = RawDataset::from_parts(vec![7; 784 * 3], vec![1, 2, 3]).unwrap();
        assert_eq!(ds.head(2).labels(), &[1, 2]);
        assert_eq!(ds.head(10).len(), 3);
    }

    proptest! {
        #[test]
        fn dataset_idx_round_trip(
            (pixels, labels) in (0usize..5).prop_flat_map(|n| (
                proptest::collection::vec(any::<u8>(), n * 784),
                proptest::collection::vec(0u8..10, n),
            ))
        ) {
            let ds = RawDataset::from_parts(pixels, labels).unwrap();
            let (img, lab) = ds.to_idx();
            let back = RawDataset::new(parse_idx_images(&img, true).unwrap(), parse_idx_labels(&lab).unwrap()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
