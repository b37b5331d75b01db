//! Flat `key = value` configuration files and run manifests.
//!
//! Blank lines and lines starting with `#` are ignored. A manifest is the same
//! format with a few reserved keys (`command`, `version`, `seed`) plus the
//! resolved settings under `config.` and input digests under `digest.`, so a
//! manifest can be passed back through `--config` to repeat a run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const CONFIG_PREFIX: &str = "config.";
const DIGEST_PREFIX: &str = "digest.";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Later entries win.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    /// Keys under `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect();
        KvConfig { entries }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Optional values are written as an empty string.
pub fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

pub fn render_optional<T: fmt::Display>(value: &Option<T>) -> String {
    value.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Settings for one command, convertible to and from a [`KvConfig`].
pub trait Settings: Default {
    fn to_kv(&self) -> KvConfig;

    /// Applies known keys; an unknown key is an error.
    fn apply(&mut self, key: &str, value: &str) -> Result<()>;

    fn apply_all(&mut self, kv: &KvConfig) -> Result<()> {
        for (k, v) in kv.iter() {
            self.apply(k, v)?;
        }
        Ok(())
    }
}

pub fn unknown_key(command: &str, key: &str) -> Error {
    Error::Config(format!("unknown `{command}` setting `{key}`"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What a command ran with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: KvConfig,
    /// Input file name to SHA-256 hex digest.
    pub digests: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: KvConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            digests: BTreeMap::new(),
        }
    }

    pub fn add_digest(&mut self, path: &Path) -> Result<()> {
        let name = file_key(path);
        let digest = sha256_file(path)?;
        self.digests.insert(name, digest);
        Ok(())
    }

    /// Checks recorded digests against files of the same name in `paths`.
    pub fn verify_inputs(&self, paths: &[PathBuf]) -> Result<()> {
        for path in paths {
            if let Some(expected) = self.digests.get(&file_key(path)) {
                let found = sha256_file(path)?;
                if &found != expected {
                    return Err(Error::DigestMismatch { path: path.clone(), expected: expected.clone(), found });
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("command", &self.command);
        kv.set("version", &self.version);
        kv.set("seed", self.seed);
        for (k, v) in self.config.iter() {
            kv.set(&format!("{CONFIG_PREFIX}{k}"), v);
        }
        for (k, v) in &self.digests {
            kv.set(&format!("{DIGEST_PREFIX}{k}"), v);
        }
        kv
    }

    pub fn render(&self) -> String {
        format!("# simplecnn run manifest\n{}", self.to_kv().render())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let field = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("manifest is missing `{k}`")));
        let mut digests = BTreeMap::new();
        for (k, v) in kv.section(DIGEST_PREFIX).iter() {
            digests.insert(k.to_string(), v.to_string());
        }
        for (k, _) in kv.iter() {
            let known = ["command", "version", "seed"].contains(&k)
                || k.starts_with(CONFIG_PREFIX)
                || k.starts_with(DIGEST_PREFIX);
            if !known {
                return Err(Error::Config(format!("unexpected manifest key `{k}`")));
            }
        }
        Ok(Self {
            command: field("command")?.to_string(),
            version: field("version")?.to_string(),
            seed: parse_value("seed", field("seed")?)?,
            config: kv.section(CONFIG_PREFIX),
            digests,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        fs::write(path, self.render()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }
}

fn file_key(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Reads `--config`: either a manifest for `command` or a plain settings file.
pub fn load_settings_file(path: &Path, command: &str) -> Result<(KvConfig, Option<RunManifest>)> {
    let kv = KvConfig::load(path)?;
    if kv.get("command").is_some() {
        let manifest = RunManifest::from_kv(&kv)?;
        if manifest.command != command {
            return Err(Error::Config(format!(
                "{} is a `{}` manifest, not `{command}`",
                path.display(),
                manifest.command
            )));
        }
        Ok((manifest.config.clone(), Some(manifest)))
    } else {
        Ok((kv, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let kv = KvConfig::parse("# c\nepochs = 5\n\n model=m5 \nsubset =\n").unwrap();
        assert_eq!(kv.get("epochs"), Some("5"));
        assert_eq!(kv.get("model"), Some("m5"));
        assert_eq!(kv.get("subset"), Some(""));
        assert_eq!(KvConfig::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn malformed_lines() {
        assert!(KvConfig::parse("epochs 5").is_err());
        assert!(KvConfig::parse("= 5").is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut config = KvConfig::new();
        config.set("model", "m7");
        config.set("epochs", 3);
        let mut m = RunManifest::new("train", 9, config);
        m.digests.insert("x.bin".into(), sha256_hex(b"abc"));
        let back = RunManifest::from_kv(&KvConfig::parse(&m.render()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(RunManifest::from_kv(&KvConfig::parse("command = train\nversion = 1\nseed = 1\nbogus = 2").unwrap()).is_err());
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn digest_verification() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("input.bin");
        fs::write(&path, b"one").unwrap();
        let mut m = RunManifest::new("eval", 0, KvConfig::new());
        m.add_digest(&path).unwrap();
        m.verify_inputs(&[path.clone()]).unwrap();
        fs::write(&path, b"two").unwrap();
        assert!(matches!(m.verify_inputs(&[path]), Err(Error::DigestMismatch { .. })));
    }
}
