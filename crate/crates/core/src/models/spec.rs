//! Declarative network descriptions.
//!
//! The M-models stack padding-free convolutions (each followed by batch norm
//! and ReLU) until the feature map is small, then map it to the 10 classes
//! with one fully-connected layer followed by 1D batch norm:
//!
//! | model | kernel | convs | channels of conv i | final map    | FC          |
//! |-------|--------|-------|--------------------|--------------|-------------|
//! | M3    | 3x3    | 10    | 16(i+1)            | 176 x 8 x 8  | 11264 -> 10 |
//! | M5    | 5x5    | 5     | 32i                | 160 x 8 x 8  | 10240 -> 10 |
//! | M7    | 7x7    | 4     | 48i                | 192 x 4 x 4  | 3072 -> 10  |
//!
//! C1/C2/C3 are conventional max-pooling baselines using 5x5 convolutions
//! with padding 2 (so 28 -> 14 -> 7):
//!
//! * C1: conv(32) pool conv(64) pool FC(10)
//! * C2: C1 with a hidden FC(128) + BN + ReLU before FC(10)
//! * C3: conv(32) conv(32) pool conv(64) conv(64) pool FC(10)

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::idx::{IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};

/// Where batch normalization is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BnMode {
    /// After every convolution and fully-connected layer.
    All,
    /// Only after the final fully-connected layer.
    FinalOnly,
    None,
}

impl BnMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BnMode::All => "all",
            BnMode::FinalOnly => "final",
            BnMode::None => "none",
        }
    }
}

impl FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(BnMode::All),
            "final" | "final_only" | "final-only" => Ok(BnMode::FinalOnly),
            "none" => Ok(BnMode::None),
            other => Err(Error::Config(format!("unknown bn mode `{other}` (all, final, none)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize, out_channels: usize, padding: usize },
    MaxPool,
    FullyConnected { out_features: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub bn: bool,
    pub relu: bool,
}

impl LayerSpec {
    pub fn conv(kernel: usize, out_channels: usize, padding: usize) -> Self {
        Self { kind: LayerKind::Conv { kernel, out_channels, padding }, bn: true, relu: true }
    }

    pub fn pool() -> Self {
        Self { kind: LayerKind::MaxPool, bn: false, relu: false }
    }

    pub fn fc(out_features: usize, relu: bool) -> Self {
        Self { kind: LayerKind::FullyConnected { out_features }, bn: true, relu }
    }

    fn describe(&self) -> String {
        let tail = format!("{}{}", if self.bn { " bn" } else { "" }, if self.relu { " relu" } else { "" });
        match self.kind {
            LayerKind::Conv { kernel, out_channels, padding } => {
                format!("conv k{kernel} c{out_channels} p{padding}{tail}")
            }
            LayerKind::MaxPool => "maxpool2".to_string(),
            LayerKind::FullyConnected { out_features } => format!("fc {out_features}{tail}"),
        }
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Map { channels, height, width } => channels * height * width,
            FeatureShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Architecture family: m3, m5, m7, c1, c2 or c3.
    pub family: String,
    pub bn_mode: BnMode,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub const FAMILIES: [&'static str; 6] = ["m3", "m5", "m7", "c1", "c2", "c3"];

    fn m_model(family: &str, kernel: usize, channels: impl Iterator<Item = usize>) -> Self {
        let mut layers: Vec<LayerSpec> = channels.map(|c| LayerSpec::conv(kernel, c, 0)).collect();
        layers.push(LayerSpec::fc(NUM_CLASSES, false));
        Self { family: family.into(), bn_mode: BnMode::All, layers }
    }

    pub fn m3() -> Self {
        Self::m_model("m3", 3, (1..=10).map(|i| 16 * (i + 1)))
    }

    pub fn m5() -> Self {
        Self::m_model("m5", 5, (1..=5).map(|i| 32 * i))
    }

    pub fn m7() -> Self {
        Self::m_model("m7", 7, (1..=4).map(|i| 48 * i))
    }

    pub fn baseline(name: &str) -> Result<Self> {
        let conv = |c| LayerSpec::conv(5, c, 2);
        let layers = match name {
            "c1" => vec![conv(32), LayerSpec::pool(), conv(64), LayerSpec::pool(), LayerSpec::fc(NUM_CLASSES, false)],
            "c2" => vec![
                conv(32),
                LayerSpec::pool(),
                conv(64),
                LayerSpec::pool(),
                LayerSpec::fc(128, true),
                LayerSpec::fc(NUM_CLASSES, false),
            ],
            "c3" => vec![
                conv(32),
                conv(32),
                LayerSpec::pool(),
                conv(64),
                conv(64),
                LayerSpec::pool(),
                LayerSpec::fc(NUM_CLASSES, false),
            ],
            other => return Err(Error::UnknownModel(other.to_string())),
        };
        Ok(Self { family: name.into(), bn_mode: BnMode::All, layers })
    }

    /// Parses `family` or `family:bn_mode`, e.g. `m5`, `m5:none`, `c3:final`.
    pub fn from_name(name: &str) -> Result<Self> {
        let (family, mode) = match name.split_once(':') {
            Some((f, m)) => (f, Some(m)),
            None => (name, None),
        };
        let spec = match family {
            "m3" => Self::m3(),
            "m5" => Self::m5(),
            "m7" => Self::m7(),
            "c1" | "c2" | "c3" => Self::baseline(family)?,
            _ => return Err(Error::UnknownModel(name.to_string())),
        };
        match mode {
            None => Ok(spec),
            Some(m) => Ok(spec.with_bn_mode(m.parse().map_err(|_| Error::UnknownModel(name.to_string()))?)),
        }
    }

    pub fn with_bn_mode(mut self, mode: BnMode) -> Self {
        let last_fc = self
            .layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::FullyConnected { .. }));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.kind == LayerKind::MaxPool {
                continue;
            }
            layer.bn = match mode {
                BnMode::All => true,
                BnMode::FinalOnly => Some(i) == last_fc,
                BnMode::None => false,
            };
        }
        self.bn_mode = mode;
        self
    }

    /// Canonical identifier, e.g. `m5` or `m5:none`.
    pub fn id(&self) -> String {
        match self.bn_mode {
            BnMode::All => self.family.clone(),
            mode => format!("{}:{}", self.family, mode.as_str()),
        }
    }

    /// Shape after each layer, starting from the `1 x 28 x 28` input.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        let mut shape = FeatureShape::Map { channels: 1, height: IMAGE_SIDE, width: IMAGE_SIDE };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer.kind, shape) {
                (LayerKind::Conv { kernel, out_channels, padding }, FeatureShape::Map { height, width, .. }) => {
                    let (h, w) = (height + 2 * padding, width + 2 * padding);
                    if kernel > h || kernel > w {
                        return Err(Error::shape(format!("layer {i}: kernel {kernel} exceeds {h}x{w}")));
                    }
                    FeatureShape::Map { channels: out_channels, height: h - kernel + 1, width: w - kernel + 1 }
                }
                (LayerKind::MaxPool, FeatureShape::Map { channels, height, width }) => {
                    if height % 2 != 0 || width % 2 != 0 {
                        return Err(Error::OddSpatialDim { height, width });
                    }
                    FeatureShape::Map { channels, height: height / 2, width: width / 2 }
                }
                (LayerKind::FullyConnected { out_features }, _) => FeatureShape::Flat(out_features),
                (kind, FeatureShape::Flat(_)) => {
                    return Err(Error::shape(format!("layer {i}: {kind:?} after a fully-connected layer")))
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        match (self.layers.last(), shapes.last()) {
            (Some(LayerSpec { kind: LayerKind::FullyConnected { .. }, .. }), Some(FeatureShape::Flat(NUM_CLASSES))) => Ok(()),
            _ => Err(Error::shape("the final layer must be fully connected with 10 outputs")),
        }
    }

    /// Feature map entering the first fully-connected layer.
    pub fn final_feature_map(&self) -> Result<FeatureShape> {
        let shapes = self.shapes()?;
        let first_fc = self
            .layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::FullyConnected { .. }))
            .ok_or_else(|| Error::shape("model has no fully-connected layer"))?;
        Ok(if first_fc == 0 {
            FeatureShape::Map { channels: 1, height: IMAGE_SIDE, width: IMAGE_SIDE }
        } else {
            shapes[first_fc - 1]
        })
    }

    pub fn describe(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(LayerSpec::describe).collect();
        format!("{}|{}", self.id(), layers.join("|"))
    }

    /// Stable hash of the layer structure.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn count(&self, pred: impl Fn(&LayerSpec) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_conv(l: &LayerSpec) -> bool {
        matches!(l.kind, LayerKind::Conv { .. })
    }

    fn is_fc(l: &LayerSpec) -> bool {
        matches!(l.kind, LayerKind::FullyConnected { .. })
    }

    #[test]
    fn m_model_final_maps() {
        let map = |spec: ModelSpec| spec.final_feature_map().unwrap();
        assert_eq!(map(ModelSpec::m3()), FeatureShape::Map { channels: 176, height: 8, width: 8 });
        assert_eq!(map(ModelSpec::m5()), FeatureShape::Map { channels: 160, height: 8, width: 8 });
        assert_eq!(map(ModelSpec::m7()), FeatureShape::Map { channels: 192, height: 4, width: 4 });
        for spec in [ModelSpec::m3(), ModelSpec::m5(), ModelSpec::m7()] {
            spec.validate().unwrap();
        }
    }

    #[test]
    fn spatial_extent_shrinks_by_k_minus_one_per_layer() {
        for (spec, k) in [(ModelSpec::m3(), 3), (ModelSpec::m5(), 5), (ModelSpec::m7(), 7)] {
            for (layer, shape) in spec.shapes().unwrap().iter().enumerate() {
                if let FeatureShape::Map { height, width, .. } = *shape {
                    assert_eq!(height, 28 - (layer + 1) * (k - 1));
                    assert_eq!(width, height);
                }
            }
        }
    }

    #[test]
    fn baselines() {
        let c1 = ModelSpec::baseline("c1").unwrap();
        assert_eq!(c1.final_feature_map().unwrap(), FeatureShape::Map { channels: 64, height: 7, width: 7 });
        let c2 = ModelSpec::baseline("c2").unwrap();
        assert_eq!(c2.layers.len(), c1.layers.len() + 1);
        assert_eq!(c2.count(is_fc), c1.count(is_fc) + 1);
        let c3 = ModelSpec::baseline("c3").unwrap();
        assert_eq!(c3.count(is_conv), 4);
        assert_eq!(c3.count(|l| l.kind == LayerKind::MaxPool), 2);
        for spec in [c1, c2, c3] {
            spec.validate().unwrap();
        }
        assert!(matches!(ModelSpec::baseline("c4"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn bn_modes_differ_only_in_bn_flags() {
        let all = ModelSpec::m5();
        let fin = ModelSpec::m5().with_bn_mode(BnMode::FinalOnly);
        let none = ModelSpec::m5().with_bn_mode(BnMode::None);
        for other in [&fin, &none] {
            assert_eq!(other.layers.len(), all.layers.len());
            for (a, b) in all.layers.iter().zip(&other.layers) {
                assert_eq!((a.kind, a.relu), (b.kind, b.relu));
            }
        }
        assert_eq!(none.count(|l| l.bn), 0);
        assert_eq!(fin.count(|l| l.bn), 1);
        assert!(fin.layers.last().unwrap().bn);
        assert_eq!(all.count(|l| l.bn), 6);
    }

    #[test]
    fn names_round_trip() {
        for name in ["m3", "m5", "m7", "c1", "c2", "c3", "m5:none", "m5:final", "c3:none"] {
            assert_eq!(ModelSpec::from_name(name).unwrap().id(), name);
        }
        assert_eq!(ModelSpec::from_name("m5:all").unwrap().id(), "m5");
        for bad in ["m4", "m5:some", ""] {
            assert!(matches!(ModelSpec::from_name(bad), Err(Error::UnknownModel(_))), "{bad}");
        }
    }

    #[test]
    fn fingerprints_distinguish_models() {
        let prints: Vec<String> = ["m3", "m5", "m7", "c1", "c2", "c3", "m5:none", "m5:final"]
            .iter()
            .map(|n| ModelSpec::from_name(n).unwrap().fingerprint())
            .collect();
        for i in 0..prints.len() {
            for j in i + 1..prints.len() {
                assert_ne!(prints[i], prints[j]);
            }
        }
        assert_eq!(ModelSpec::m5().fingerprint(), ModelSpec::m5().fingerprint());
    }
}
