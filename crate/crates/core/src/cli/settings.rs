//! Resolved settings of every command and their key names.

use std::path::PathBuf;

use crate::cli::config::{parse_optional, parse_value, render_optional, unknown_key, KvConfig, Settings};
use crate::ensemble::{Strategy, DEFAULT_BINS, DEFAULT_TRIALS};
use crate::error::{Error, Result};
use crate::nn::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::trainer::TrainConfig;

impl Settings for TrainConfig {
    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("model", &self.model);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("translate", self.augment.translate_enabled);
        kv.set("rotate", self.augment.rotate_enabled);
        kv.set("max_translate_fraction", self.augment.max_translate_fraction);
        kv.set("max_rotate_degrees", self.augment.max_rotate_degrees);
        kv.set("base_lr", self.lr.base_lr);
        kv.set("lr_gamma", self.lr.gamma);
        kv.set("ema_decay", self.ema_decay);
        kv.set("ema_include_bn", self.ema_include_bn);
        kv.set("eval_every", self.eval_every);
        kv.set("track_train_acc", self.track_train_acc);
        kv.set("save_best", self.save_best);
        kv.set("select_by", self.select_by.as_str());
        kv.set("out_dir", render_optional(&self.out_dir.as_ref().map(|p| p.display())));
        kv.set("subset", render_optional(&self.subset));
        kv.set("eval_batch", self.eval_batch);
        kv
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = value.to_string(),
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "translate" => self.augment.translate_enabled = parse_value(key, value)?,
            "rotate" => self.augment.rotate_enabled = parse_value(key, value)?,
            "max_translate_fraction" => self.augment.max_translate_fraction = parse_value(key, value)?,
            "max_rotate_degrees" => self.augment.max_rotate_degrees = parse_value(key, value)?,
            "base_lr" => self.lr.base_lr = parse_value(key, value)?,
            "lr_gamma" => self.lr.gamma = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "ema_include_bn" => self.ema_include_bn = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "track_train_acc" => self.track_train_acc = parse_value(key, value)?,
            "save_best" => self.save_best = parse_value(key, value)?,
            "select_by" => self.select_by = value.parse()?,
            "out_dir" => self.out_dir = parse_optional::<PathBuf>(key, value)?,
            "subset" => self.subset = parse_optional(key, value)?,
            "eval_batch" => self.eval_batch = parse_value(key, value)?,
            _ => return Err(unknown_key("train", key)),
        }
        Ok(())
    }
}

/// Which weights of a checkpoint to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightView {
    Ema,
    Raw,
}

impl WeightView {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightView::Ema => "ema",
            WeightView::Raw => "raw",
        }
    }
}

impl std::str::FromStr for WeightView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(WeightView::Ema),
            "raw" => Ok(WeightView::Raw),
            other => Err(Error::Config(format!("unknown weight view `{other}` (ema, raw)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub weights: WeightView,
    pub matrix: PathBuf,
    /// Row id; defaults to `<checkpoint stem>:<weights>`.
    pub id: Option<String>,
    pub eval_batch: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            weights: WeightView::Ema,
            matrix: PathBuf::from("predictions.csv"),
            id: None,
            eval_batch: crate::trainer::DEFAULT_EVAL_BATCH,
        }
    }
}

impl EvalSettings {
    pub fn row_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            let stem = self.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let parent = self
                .checkpoint
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| format!("{}/", s.to_string_lossy()))
                .unwrap_or_default();
            format!("{parent}{stem}:{}", self.weights.as_str())
        })
    }
}

impl Settings for EvalSettings {
    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("checkpoint", self.checkpoint.display());
        kv.set("weights", self.weights.as_str());
        kv.set("matrix", self.matrix.display());
        kv.set("id", self.row_id());
        kv.set("eval_batch", self.eval_batch);
        kv
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "weights" => self.weights = value.parse()?,
            "matrix" => self.matrix = PathBuf::from(value),
            "id" => self.id = parse_optional(key, value)?,
            "eval_batch" => self.eval_batch = parse_value(key, value)?,
            _ => return Err(unknown_key("eval", key)),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteSettings {
    pub matrix: PathBuf,
    pub strategy: Strategy,
    pub types: [String; 3],
    pub trials: usize,
    pub seed: u64,
    pub exhaustive: bool,
    pub bins: usize,
    pub out: PathBuf,
}

impl Default for VoteSettings {
    fn default() -> Self {
        Self {
            matrix: PathBuf::from("predictions.csv"),
            strategy: Strategy::Heterogeneous,
            types: ["m3".into(), "m5".into(), "m7".into()],
            trials: DEFAULT_TRIALS,
            seed: 0,
            exhaustive: false,
            bins: DEFAULT_BINS,
            out: PathBuf::from("distribution.csv"),
        }
    }
}

pub fn parse_types(value: &str) -> Result<[String; 3]> {
    let parts: Vec<String> = value.split(',').map(|s| s.trim().to_string()).collect();
    <[String; 3]>::try_from(parts).map_err(|_| Error::Config(format!("expected three comma-separated types, got `{value}`")))
}

impl Settings for VoteSettings {
    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("matrix", self.matrix.display());
        kv.set("strategy", &self.strategy);
        kv.set("types", self.types.join(","));
        kv.set("trials", self.trials);
        kv.set("seed", self.seed);
        kv.set("exhaustive", self.exhaustive);
        kv.set("bins", self.bins);
        kv.set("out", self.out.display());
        kv
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "matrix" => self.matrix = PathBuf::from(value),
            "strategy" => self.strategy = value.parse()?,
            "types" => self.types = parse_types(value)?,
            "trials" => self.trials = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "exhaustive" => self.exhaustive = parse_value(key, value)?,
            "bins" => self.bins = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(unknown_key("vote", key)),
        }
        Ok(())
    }
}

pub const DEFAULT_BASE_URL: &str = "https://storage.googleapis.com/cvdf-datasets/mnist/";

#[derive(Debug, Clone, PartialEq)]
pub struct FetchSettings {
    /// Files are fetched as `<base_url><name>.gz`.
    pub base_url: String,
    pub dir: PathBuf,
}

impl Default for FetchSettings {
    fn default() -> Self {
        Self { base_url: DEFAULT_BASE_URL.into(), dir: crate::data::data_dir() }
    }
}

impl Settings for FetchSettings {
    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("base_url", &self.base_url);
        kv.set("dir", self.dir.display());
        kv
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "base_url" => self.base_url = value.to_string(),
            "dir" => self.dir = PathBuf::from(value),
            _ => return Err(unknown_key("fetch-data", key)),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    pub out: PathBuf,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { seeds: 20, step: DEFAULT_STEP, tolerance: DEFAULT_TOLERANCE, out: PathBuf::from("runs/gradcheck") }
    }
}

impl Settings for GradcheckSettings {
    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seeds", self.seeds);
        kv.set("step", self.step);
        kv.set("tolerance", self.tolerance);
        kv.set("out", self.out.display());
        kv
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seeds" => self.seeds = parse_value(key, value)?,
            "step" => self.step = parse_value(key, value)?,
            "tolerance" => self.tolerance = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(unknown_key("gradcheck", key)),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl Scale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }

    /// Networks per configuration and epochs per network.
    pub fn preset(&self) -> (usize, usize) {
        match self {
            Scale::Desk => (3, 15),
            Scale::Full => (30, 150),
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!("unknown scale `{other}` (desk, full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub table: u8,
    pub scale: Scale,
    pub nets: usize,
    pub epochs: usize,
    pub subset: Option<usize>,
    /// Base seed; network `k` of a configuration trains with seed `seed + k`.
    pub seed: u64,
    pub trials: usize,
    /// First epoch of the accuracy band; defaults to a third of `epochs`.
    pub band_from: Option<usize>,
    pub out: PathBuf,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let (nets, epochs) = Scale::Desk.preset();
        Self {
            table: 1,
            scale: Scale::Desk,
            nets,
            epochs,
            subset: None,
            seed: 0,
            trials: DEFAULT_TRIALS,
            band_from: None,
            out: PathBuf::from("runs/experiments"),
        }
    }
}

impl ExperimentSettings {
    pub fn for_scale(table: u8, scale: Scale) -> Self {
        let (nets, epochs) = scale.preset();
        Self { table, scale, nets, epochs, ..Self::default() }
    }

    pub fn band(&self) -> (usize, usize) {
        (self.band_from.unwrap_or((self.epochs / 3).max(1)), self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=7).contains(&self.table) {
            return Err(Error::Config(format!("unknown table {} (1 to 7)", self.table)));
        }
        if self.nets == 0 || self.epochs == 0 || self.trials == 0 {
            return Err(Error::Config("nets, epochs and trials must be positive".into()));
        }
        let (from, to) = self.band();
        if from == 0 || from > to {
            return Err(Error::Config(format!("band {from}..={to} is empty")));
        }
        Ok(())
    }
}

impl Settings for ExperimentSettings {
    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("table", self.table);
        kv.set("scale", self.scale.as_str());
        kv.set("nets", self.nets);
        kv.set("epochs", self.epochs);
        kv.set("subset", render_optional(&self.subset));
        kv.set("seed", self.seed);
        kv.set("trials", self.trials);
        kv.set("band_from", self.band().0);
        kv.set("out", self.out.display());
        kv
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "table" => self.table = parse_value(key, value)?,
            "scale" => self.scale = value.parse()?,
            "nets" => self.nets = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "subset" => self.subset = parse_optional(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "trials" => self.trials = parse_value(key, value)?,
            "band_from" => self.band_from = parse_optional(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(unknown_key("experiment", key)),
        }
        Ok(())
    }
}
