//! Binary checkpoint format.
//!
//! ```text
//! magic    b"SCNNCKPT"
//! version  u32
//! model    str             (u32 length + UTF-8)
//! print    str             spec fingerprint
//! meta     epoch u64, seed u64, has_acc u8, acc f64
//! params   tensor list     learnable, then running statistics
//! adam     u8 flag [beta1 f64, beta2 f64, eps f64, t u64, m list, v list]
//! ema      u8 flag [decay f64, include_buffers u8, shadow list]
//! sha256   32 bytes over everything above
//! ```
//!
//! A tensor list is a u32 count of `(name str, rank u32, dims u64.., f32..)`
//! records. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::network::Network;
use crate::models::params::{ParamEma, ParamSet};
use crate::nn::Tensor;
use crate::optim::{AdamConfig, AdamState, EmaState};

pub const MAGIC: &[u8; 8] = b"SCNNCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub fingerprint: String,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
    pub ema: Option<ParamEma>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(net: &Network, params: ParamSet, meta: CheckpointMeta) -> Self {
        Self {
            model: net.spec().id(),
            fingerprint: net.spec().fingerprint(),
            params,
            adam: None,
            ema: None,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.model);
        w.str(&self.fingerprint);
        w.u64(self.meta.epoch);
        w.u64(self.meta.seed);
        w.u8(self.meta.test_accuracy.is_some() as u8);
        w.f64(self.meta.test_accuracy.unwrap_or(0.0));

        let p = &self.params;
        let named: Vec<(&str, &Tensor)> = p.named().collect();
        w.u32(p.names.len() as u32);
        w.tensors(&named);

        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.f64(a.config.beta1);
                w.f64(a.config.beta2);
                w.f64(a.config.eps);
                w.u64(a.t);
                w.unnamed(&a.m);
                w.unnamed(&a.v);
            }
        }
        match &self.ema {
            None => w.u8(0),
            Some(e) => {
                w.u8(1);
                w.f64(e.state.decay);
                w.u8(e.include_buffers as u8);
                w.unnamed(&e.state.shadow);
            }
        }
        let digest = Sha256::digest(&w.buf);
        w.buf.extend_from_slice(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CorruptFile("not a checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptFile("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version });
        }
        let model = r.str()?;
        let fingerprint = r.str()?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let has_acc = r.flag()?;
        let acc = r.f64()?;
        let meta = CheckpointMeta { epoch, seed, test_accuracy: has_acc.then_some(acc) };

        let learnable = r.u32()? as usize;
        let tensors = r.tensors()?;
        if learnable > tensors.len() {
            return Err(Error::CorruptFile("learnable count exceeds tensor count".into()));
        }
        let (names, values): (Vec<String>, Vec<Tensor>) = tensors.into_iter().unzip();
        let (buffer_names, buffers) = (names[learnable..].to_vec(), values[learnable..].to_vec());
        let params = ParamSet {
            names: names[..learnable].to_vec(),
            values: values[..learnable].to_vec(),
            buffer_names,
            buffers,
        };

        let adam = if r.flag()? {
            let config = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
            let t = r.u64()?;
            Some(AdamState { config, t, m: r.unnamed()?, v: r.unnamed()? })
        } else {
            None
        };
        let ema = if r.flag()? {
            let decay = r.f64()?;
            let include_buffers = r.flag()?;
            Some(ParamEma { state: EmaState { decay, shadow: r.unnamed()? }, include_buffers })
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(Error::CorruptFile(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { model, fingerprint, params, adam, ema, meta })
    }

    /// Verifies the checkpoint was written for `net` and matches its layout.
    pub fn check_against(&self, net: &Network) -> Result<()> {
        let expected = net.spec().fingerprint();
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch { expected, found: self.fingerprint.clone() });
        }
        net.check_params(&self.params)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads and checks the checkpoint against `net`.
pub fn load_checkpoint_for(path: &Path, net: &Network) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_against(net)?;
    Ok(ckpt)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.buf.reserve(t.len() * 4);
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn tensors(&mut self, list: &[(&str, &Tensor)]) {
        self.u32(list.len() as u32);
        for (name, t) in list {
            self.tensor(name, t);
        }
    }

    fn unnamed(&mut self, list: &[Tensor]) {
        let named: Vec<(&str, &Tensor)> = list.iter().map(|t| ("", t)).collect();
        self.tensors(&named);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.array::<1>()?[0] {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::CorruptFile(format!("bad flag byte {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::CorruptFile("invalid UTF-8 name".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<usize>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes = len
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| Error::CorruptFile("tensor size overflows".into()))?;
        let data = self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        (0..count).map(|_| self.tensor()).collect()
    }

    fn unnamed(&mut self) -> Result<Vec<Tensor>> {
        Ok(self.tensors()?.into_iter().map(|(_, t)| t).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample(net: &Network) -> Checkpoint {
        let params = net.init_params(&mut seeded(5));
        let mut adam = AdamState::new(&params.values, AdamConfig::default());
        let grads: Vec<Tensor> = params.values.iter().map(|p| p.map(|v| v * 0.5 + 0.1)).collect();
        let mut moved = params.clone();
        adam.step(&mut moved.values, &grads, 1e-3).unwrap();
        let mut ema = ParamEma::new(&params, 0.999, true);
        ema.update(&moved).unwrap();
        let mut ckpt = Checkpoint::new(net, moved, CheckpointMeta { epoch: 3, seed: 42, test_accuracy: Some(0.987) });
        ckpt.adam = Some(adam);
        ckpt.ema = Some(ema);
        ckpt
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::from_name("c1").unwrap();
        let ckpt = sample(&net);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        back.check_against(&net).unwrap();

        let bare = Checkpoint::new(&net, net.init_params(&mut seeded(1)), CheckpointMeta { epoch: 0, seed: 1, test_accuracy: None });
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let net = Network::from_name("c1").unwrap();
        let ckpt = sample(&net);
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint_for(&path, &net).unwrap(), ckpt);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let net = Network::from_name("c1").unwrap();
        let bytes = sample(&net).to_bytes();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptFile(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn version_checked() {
        let net = Network::from_name("c1").unwrap();
        let mut bytes = sample(&net).to_bytes();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn wrong_model_rejected() {
        let m5 = Network::from_name("m5").unwrap();
        let m3 = Network::from_name("m3").unwrap();
        let ckpt = Checkpoint::new(&m5, m5.init_params(&mut seeded(0)), CheckpointMeta { epoch: 0, seed: 0, test_accuracy: None });
        assert!(matches!(ckpt.check_against(&m3), Err(Error::FingerprintMismatch { .. })));
    }
}
