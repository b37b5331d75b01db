//! Majority voting over per-network predictions, ensemble sampling, and the
//! summary statistics reported for them.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed, stream, Rng};

pub const DEFAULT_TRIALS: usize = 1000;
pub const DEFAULT_BINS: usize = 30;
pub const DEFAULT_TOP_K: usize = 10;
const TRUTH_ID: &str = "truth";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRow {
    pub id: String,
    pub model_type: String,
    pub labels: Vec<u8>,
}

/// Predicted labels of many networks on the same test images, plus the truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionMatrix {
    pub truth: Vec<u8>,
    pub rows: Vec<PredictionRow>,
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        Some(index) => Err(Error::BadLabel { index, label: labels[index] }),
        None => Ok(()),
    }
}

impl PredictionMatrix {
    pub fn new(truth: Vec<u8>) -> Result<Self> {
        check_labels(&truth)?;
        Ok(Self { truth, rows: Vec::new() })
    }

    /// Adds a row, replacing any existing row with the same id. Returns
    /// `true` when a row was replaced.
    pub fn upsert(&mut self, id: &str, model_type: &str, labels: Vec<u8>) -> Result<bool> {
        if labels.len() != self.truth.len() {
            return Err(Error::shape(format!("row `{id}` has {} labels, truth has {}", labels.len(), self.truth.len())));
        }
        if id == TRUTH_ID {
            return Err(Error::Config(format!("`{TRUTH_ID}` is reserved")));
        }
        check_labels(&labels)?;
        let row = PredictionRow { id: id.into(), model_type: model_type.into(), labels };
        match self.rows.iter_mut().find(|r| r.id == id) {
            Some(existing) => {
                *existing = row;
                Ok(true)
            }
            None => {
                self.rows.push(row);
                Ok(false)
            }
        }
    }

    pub fn num_images(&self) -> usize {
        self.truth.len()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.rows
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| Error::UnknownMember(id.to_string()))
    }

    pub fn accuracy(&self, row: usize) -> f64 {
        accuracy(&self.rows[row].labels, &self.truth)
    }

    /// Row indices of one model type, in matrix order.
    pub fn rows_of_type(&self, model_type: &str) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].model_type == model_type).collect()
    }

    /// Distinct model types in order of first appearance.
    pub fn model_types(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.model_type.clone()))
            .map(|r| r.model_type.clone())
            .collect()
    }

    /// CSV: `network_id,model_type,p0..p{n-1}`; the first data row is the truth.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["network_id".to_string(), "model_type".to_string()];
        header.extend((0..self.truth.len()).map(|i| format!("p{i}")));
        w.write_record(&header)?;
        let record = |id: &str, ty: &str, labels: &[u8]| {
            let mut rec = vec![id.to_string(), ty.to_string()];
            rec.extend(labels.iter().map(u8::to_string));
            rec
        };
        w.write_record(record(TRUTH_ID, TRUTH_ID, &self.truth))?;
        for row in &self.rows {
            w.write_record(record(&row.id, &row.model_type, &row.labels))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut matrix: Option<Self> = None;
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let (id, ty) = (record.get(0).unwrap_or_default(), record.get(1).unwrap_or_default());
            let labels = record
                .iter()
                .skip(2)
                .map(|s| s.parse::<u8>())
                .collect::<std::result::Result<Vec<u8>, _>>()
                .map_err(|_| Error::CorruptFile(format!("{}: bad label on row {}", path.display(), line + 1)))?;
            match matrix.as_mut() {
                None if id == TRUTH_ID => matrix = Some(Self::new(labels)?),
                None => return Err(Error::CorruptFile(format!("{}: first row must be the truth", path.display()))),
                Some(m) => {
                    if m.upsert(id, ty, labels)? {
                        return Err(Error::CorruptFile(format!("{}: duplicate network `{id}`", path.display())));
                    }
                }
            }
        }
        matrix.ok_or_else(|| Error::CorruptFile(format!("{}: no truth row", path.display())))
    }

    /// Loads `path` if it exists, otherwise starts a matrix for `truth`.
    pub fn open_or_new(path: &Path, truth: &[u8]) -> Result<Self> {
        if !path.exists() {
            return Self::new(truth.to_vec());
        }
        let m = Self::read_csv(path)?;
        if m.truth != truth {
            return Err(Error::Config(format!("{} was built for different test labels", path.display())));
        }
        Ok(m)
    }
}

pub fn accuracy(predictions: &[u8], truth: &[u8]) -> f64 {
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    correct as f64 / truth.len().max(1) as f64
}

/// The class with at least two votes, or a uniformly random one of the three
/// votes when all differ.
pub fn majority_vote(votes: [u8; 3], rng: &mut Rng) -> Result<u8> {
    check_labels(&votes)?;
    Ok(vote3(votes, || rng.gen_range(0..3)))
}

#[inline]
fn vote3(v: [u8; 3], mut pick: impl FnMut() -> usize) -> u8 {
    if v[0] == v[1] || v[0] == v[2] {
        v[0]
    } else if v[1] == v[2] {
        v[1]
    } else {
        v[pick()]
    }
}

/// Majority vote within each group, then across the three group winners.
pub fn two_level_vote(groups: [[u8; 3]; 3], rng: &mut Rng) -> Result<u8> {
    for g in &groups {
        check_labels(g)?;
    }
    let level1 = groups.map(|g| vote3(g, || rng.gen_range(0..3)));
    Ok(vote3(level1, || rng.gen_range(0..3)))
}

/// Per-image tie-break stream: depends only on the ensemble seed and the image.
fn tie_rng(seed: u64, image: usize) -> Rng {
    derive_rng(seed, &[stream::TIE, image as u64])
}

fn vote_rows(matrix: &PredictionMatrix, rows: [usize; 3], seed: u64) -> f64 {
    let [a, b, c] = rows.map(|r| &matrix.rows[r].labels);
    let correct = (0..matrix.num_images())
        .filter(|&i| {
            let winner = vote3([a[i], b[i], c[i]], || tie_rng(seed, i).gen_range(0..3));
            winner == matrix.truth[i]
        })
        .count();
    correct as f64 / matrix.num_images().max(1) as f64
}

fn vote_two_level(matrix: &PredictionMatrix, groups: [[usize; 3]; 3], seed: u64) -> f64 {
    let rows = groups.map(|g| g.map(|r| &matrix.rows[r].labels));
    let correct = (0..matrix.num_images())
        .filter(|&i| {
            let mut rng: Option<Rng> = None;
            let mut pick = || rng.get_or_insert_with(|| tie_rng(seed, i)).gen_range(0..3);
            let level1 = rows.map(|g| vote3([g[0][i], g[1][i], g[2][i]], &mut pick));
            vote3(level1, &mut pick) == matrix.truth[i]
        })
        .count();
    correct as f64 / matrix.num_images().max(1) as f64
}

/// Accuracy of the majority vote of three named networks.
pub fn ensemble_accuracy(matrix: &PredictionMatrix, members: &[&str], seed: u64) -> Result<f64> {
    let rows: Vec<usize> = members.iter().map(|m| matrix.index_of(m)).collect::<Result<_>>()?;
    let rows: [usize; 3] = rows
        .try_into()
        .map_err(|_| Error::Config(format!("majority voting needs 3 members, got {}", members.len())))?;
    Ok(vote_rows(matrix, rows, seed))
}

/// Accuracy of a two-level vote over three groups of three named networks.
pub fn two_level_accuracy(matrix: &PredictionMatrix, groups: [[&str; 3]; 3], seed: u64) -> Result<f64> {
    let mut idx = [[0; 3]; 3];
    for (g, group) in groups.iter().enumerate() {
        for (k, id) in group.iter().enumerate() {
            idx[g][k] = matrix.index_of(id)?;
        }
    }
    Ok(vote_two_level(matrix, idx, seed))
}

/// How ensembles are drawn from the pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    /// Three distinct networks of one type.
    Homogeneous(String),
    /// One network of each of three types.
    Heterogeneous,
    /// A homogeneous ensemble of each type, then a vote across types.
    TwoLevel,
    /// As `TwoLevel`, drawing each type's ensemble from its `top_k` most
    /// accurate homogeneous ensembles.
    TwoLevelBest { top_k: usize },
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Homogeneous(t) => write!(f, "homogeneous:{t}"),
            Strategy::Heterogeneous => f.write_str("heterogeneous"),
            Strategy::TwoLevel => f.write_str("two-level"),
            Strategy::TwoLevelBest { top_k } => write!(f, "two-level-best:{top_k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = s.split_once(':').map_or((s, None), |(h, a)| (h, Some(a)));
        match (head, arg) {
            ("homogeneous", Some(t)) if !t.is_empty() => Ok(Strategy::Homogeneous(t.into())),
            ("heterogeneous", None) => Ok(Strategy::Heterogeneous),
            ("two-level", None) => Ok(Strategy::TwoLevel),
            ("two-level-best", None) => Ok(Strategy::TwoLevelBest { top_k: DEFAULT_TOP_K }),
            ("two-level-best", Some(k)) => k
                .parse()
                .ok()
                .filter(|&k| k > 0)
                .map(|top_k| Strategy::TwoLevelBest { top_k })
                .ok_or_else(|| Error::Config(format!("bad top-k in `{s}`"))),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (homogeneous:<type>, heterogeneous, two-level, two-level-best[:k])"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleConfig {
    pub strategy: Strategy,
    /// The three model types used by the cross-type strategies.
    pub types: [String; 3],
    pub trials: usize,
    pub seed: u64,
    /// Visit every possible ensemble once instead of sampling `trials`.
    pub exhaustive: bool,
    pub bins: usize,
}

impl EnsembleConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            types: ["m3".into(), "m5".into(), "m7".into()],
            trials: DEFAULT_TRIALS,
            seed,
            exhaustive: false,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Accuracies of sampled ensembles with their members and summary numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyDistribution {
    pub samples: Vec<f64>,
    /// Network ids of each sample's ensemble.
    pub members: Vec<Vec<String>>,
    pub bins: Vec<Bin>,
    pub mean: f64,
    /// 95% half-width; `None` with fewer than two samples.
    pub ci_half_width: Option<f64>,
}

impl AccuracyDistribution {
    pub fn new(samples: Vec<f64>, members: Vec<Vec<String>>, bins: usize) -> Self {
        let mean = if samples.is_empty() { f64::NAN } else { samples.iter().sum::<f64>() / samples.len() as f64 };
        let ci_half_width = confidence_range_95(&samples).ok().map(|(_, h)| h);
        Self { bins: histogram(&samples, bins), samples, members, mean, ci_half_width }
    }

    /// Highest accuracy and its members (earliest sample wins ties).
    pub fn best(&self) -> Result<(f64, &[String])> {
        let (i, acc) = best_of(&self.samples)?;
        Ok((acc, &self.members[i]))
    }
}

/// Fixed-width bins over `[min, max]`; the last bin is closed on the right.
pub fn histogram(samples: &[f64], bins: usize) -> Vec<Bin> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|b| Bin {
            left: lo + width * b as f64,
            right: if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 },
            count: 0,
        })
        .collect();
    for &s in samples {
        let b = if width > 0.0 { (((s - lo) / width) as usize).min(bins - 1) } else { 0 };
        out[b].count += 1;
    }
    out
}

/// `(mean, 1.96 * s / sqrt(n))` with `s` the sample standard deviation.
pub fn confidence_range_95(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    // Summation rounding would otherwise leave a spurious nonzero spread.
    if samples.iter().all(|&x| x == samples[0]) {
        return Ok((samples[0], 0.0));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Index and value of the maximum; the lowest index wins ties.
pub fn best_of(values: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.ok_or(Error::Empty)
}

fn pool(matrix: &PredictionMatrix, model_type: &str, need: usize) -> Result<Vec<usize>> {
    let rows = matrix.rows_of_type(model_type);
    if rows.len() < need {
        return Err(Error::PoolTooSmall(format!(
            "{} network(s) of type `{model_type}`, need {need}",
            rows.len()
        )));
    }
    Ok(rows)
}

fn draw3(rows: &[usize], rng: &mut Rng) -> [usize; 3] {
    let mut picked: Vec<usize> = sample(rng, rows.len(), 3).into_iter().map(|i| rows[i]).collect();
    picked.sort_unstable();
    [picked[0], picked[1], picked[2]]
}

fn triples(rows: &[usize]) -> Vec<[usize; 3]> {
    let n = rows.len();
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                out.push([rows[a], rows[b], rows[c]]);
            }
        }
    }
    out
}

/// The `k` most accurate homogeneous ensembles of a pool, scored with the
/// given seed. Enumerates every triple.
fn top_triples(matrix: &PredictionMatrix, rows: &[usize], k: usize, seed: u64) -> Vec<[usize; 3]> {
    let mut scored: Vec<(f64, [usize; 3])> = triples(rows)
        .into_iter()
        .map(|t| {
            let ids = t.map(|r| matrix.rows[r].id.as_str());
            (vote_rows(matrix, t, ensemble_seed(seed, &ids)), t)
        })
        .collect();
    // Stable sort keeps enumeration order among equal accuracies.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().take(k).map(|(_, t)| t).collect()
}

enum Draw {
    Single([usize; 3]),
    Nested([[usize; 3]; 3]),
}

/// Tie-break seed of one ensemble: a function of the run seed and the member
/// ids, so the same ensemble always scores the same.
pub fn ensemble_seed(seed: u64, members: &[&str]) -> u64 {
    let coords: Vec<u64> = members
        .iter()
        .map(|id| id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)))
        .collect();
    derive_seed(seed, &coords)
}

/// Samples ensembles according to `config` and summarizes their accuracies.
///
/// Members are drawn without replacement within an ensemble; ensembles are
/// drawn independently across trials. Ties are broken with
/// [`ensemble_seed`].
pub fn sample_ensembles(matrix: &PredictionMatrix, config: &EnsembleConfig) -> Result<AccuracyDistribution> {
    let draws: Vec<Draw> = match &config.strategy {
        Strategy::Homogeneous(t) => {
            let rows = pool(matrix, t, 3)?;
            if config.exhaustive {
                triples(&rows).into_iter().map(Draw::Single).collect()
            } else {
                (0..config.trials)
                    .map(|t| Draw::Single(draw3(&rows, &mut trial_rng(config.seed, t))))
                    .collect()
            }
        }
        Strategy::Heterogeneous => {
            let pools: Vec<Vec<usize>> = config.types.iter().map(|t| pool(matrix, t, 1)).collect::<Result<_>>()?;
            if config.exhaustive {
                let mut out = Vec::new();
                for &a in &pools[0] {
                    for &b in &pools[1] {
                        for &c in &pools[2] {
                            out.push(Draw::Single([a, b, c]));
                        }
                    }
                }
                out
            } else {
                (0..config.trials)
                    .map(|t| {
                        let mut rng = trial_rng(config.seed, t);
                        Draw::Single([0, 1, 2].map(|g| pools[g][rng.gen_range(0..pools[g].len())]))
                    })
                    .collect()
            }
        }
        Strategy::TwoLevel | Strategy::TwoLevelBest { .. } => {
            let pools: Vec<Vec<usize>> = config.types.iter().map(|t| pool(matrix, t, 3)).collect::<Result<_>>()?;
            let candidates: Vec<Vec<[usize; 3]>> = match config.strategy {
                Strategy::TwoLevelBest { top_k } => {
                    pools.iter().map(|rows| top_triples(matrix, rows, top_k, config.seed)).collect()
                }
                _ => pools.iter().map(|rows| triples(rows)).collect(),
            };
            if config.exhaustive {
                let mut out = Vec::new();
                for a in &candidates[0] {
                    for b in &candidates[1] {
                        for c in &candidates[2] {
                            out.push(Draw::Nested([*a, *b, *c]));
                        }
                    }
                }
                out
            } else if config.strategy == Strategy::TwoLevel {
                (0..config.trials)
                    .map(|t| {
                        let mut rng = trial_rng(config.seed, t);
                        Draw::Nested([0, 1, 2].map(|g| draw3(&pools[g], &mut rng)))
                    })
                    .collect()
            } else {
                (0..config.trials)
                    .map(|t| {
                        let mut rng = trial_rng(config.seed, t);
                        Draw::Nested([0, 1, 2].map(|g| candidates[g][rng.gen_range(0..candidates[g].len())]))
                    })
                    .collect()
            }
        }
    };

    let mut samples = Vec::with_capacity(draws.len());
    let mut members = Vec::with_capacity(draws.len());
    for draw in &draws {
        let rows = match draw {
            Draw::Single(r) => r.to_vec(),
            Draw::Nested(g) => g.concat(),
        };
        let ids: Vec<&str> = rows.iter().map(|&r| matrix.rows[r].id.as_str()).collect();
        let seed = ensemble_seed(config.seed, &ids);
        samples.push(match draw {
            Draw::Single(r) => vote_rows(matrix, *r, seed),
            Draw::Nested(g) => vote_two_level(matrix, *g, seed),
        });
        members.push(ids.into_iter().map(String::from).collect());
    }
    Ok(AccuracyDistribution::new(samples, members, config.bins))
}

fn trial_rng(seed: u64, trial: usize) -> Rng {
    derive_rng(seed, &[stream::TRIAL, trial as u64])
}

/// Path of the raw-samples companion file: `dist.csv` -> `dist_samples.csv`.
pub fn samples_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_samples.csv"))
}

/// Writes the histogram (`bin_left,bin_right,count`) to `path` and the raw
/// samples (`trial,accuracy,members`) next to it.
pub fn export_distribution_csv(dist: &AccuracyDistribution, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_left", "bin_right", "count"])?;
    for b in &dist.bins {
        w.write_record([b.left.to_string(), b.right.to_string(), b.count.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let companion = samples_path(path);
    let mut w = csv::Writer::from_path(&companion)?;
    w.write_record(["trial", "accuracy", "members"])?;
    for (t, (acc, m)) in dist.samples.iter().zip(&dist.members).enumerate() {
        w.write_record([t.to_string(), acc.to_string(), m.join(" ")])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", companion.display()), e))
}
