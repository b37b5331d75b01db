//! Placing and verifying the four MNIST IDX files.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::cli::config::{sha256_file, sha256_hex};
use crate::data::idx::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use crate::error::{Error, Result};

/// Uncompressed file name and its SHA-256.
pub const MNIST_FILES: [(&str, &str); 4] = [
    (TRAIN_IMAGES, "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    (TRAIN_LABELS, "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    (TEST_IMAGES, "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    (TEST_LABELS, "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

pub fn data_files(dir: &Path) -> Vec<PathBuf> {
    MNIST_FILES.iter().map(|(name, _)| dir.join(name)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchStatus {
    Present,
    Downloaded,
}

/// Makes sure `dir` holds the four files with the expected digests,
/// downloading `<base_url><name>.gz` for any that are missing. Existing files
/// are never overwritten.
pub fn fetch_data(dir: &Path, base_url: &str) -> Result<Vec<(PathBuf, FetchStatus)>> {
    fetch_with(dir, base_url, &MNIST_FILES, &mut download)
}

pub(crate) fn fetch_with(
    dir: &Path,
    base_url: &str,
    files: &[(&str, &str)],
    get: &mut dyn FnMut(&str) -> Result<Vec<u8>>,
) -> Result<Vec<(PathBuf, FetchStatus)>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut out = Vec::new();
    for (name, expected) in files {
        let path = dir.join(name);
        if path.exists() {
            let found = sha256_file(&path)?;
            if found != *expected {
                return Err(Error::DigestMismatch { path, expected: expected.to_string(), found });
            }
            out.push((path, FetchStatus::Present));
            continue;
        }
        let url = format!("{base_url}{name}.gz");
        let bytes = gunzip(&url, &get(&url)?)?;
        let found = sha256_hex(&bytes);
        if found != *expected {
            return Err(Error::DigestMismatch { path, expected: expected.to_string(), found });
        }
        let tmp = path.with_extension("part");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))?;
        out.push((path, FetchStatus::Downloaded));
    }
    Ok(out)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let failed = |reason: String| Error::DownloadFailed { url: url.to_string(), reason };
    let response = ureq::get(url).call().map_err(|e| failed(e.to_string()))?;
    let mut bytes = Vec::new();
    response.into_reader().read_to_end(&mut bytes).map_err(|e| failed(e.to_string()))?;
    Ok(bytes)
}

fn gunzip(url: &str, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::DownloadFailed { url: url.to_string(), reason: format!("gunzip: {e}") })?;
    Ok(out)
}
