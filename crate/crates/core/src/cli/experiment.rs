//! Table-shaped experiments: train the needed networks (cached per run
//! directory), vote, and print the numbers next to the published ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cli::config::{RunManifest, Settings};
use crate::cli::settings::ExperimentSettings;
use crate::data::{AugmentConfig, RawDataset};
use crate::ensemble::{
    best_of, confidence_range_95, sample_ensembles, EnsembleConfig, PredictionMatrix, Strategy, DEFAULT_TOP_K,
};
use crate::error::{Error, Result};
use crate::trainer::{epoch_band_stats, read_metrics_csv, train_run_with, EpochMetrics, Selection, TrainConfig, METRICS_FILE};

pub const RUN_MANIFEST: &str = "manifest.txt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// One network to train.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunKey {
    pub model: String,
    pub translate: bool,
    pub rotate: bool,
    pub seed: u64,
}

impl RunKey {
    pub fn new(model: &str, seed: u64) -> Self {
        Self { model: model.to_string(), translate: true, rotate: true, seed }
    }

    pub fn name(&self) -> String {
        format!("{}_t{}r{}_s{}", self.model.replace(':', "-"), self.translate as u8, self.rotate as u8, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub key: RunKey,
    pub metrics: Vec<EpochMetrics>,
    /// Test predictions of the selected (best) checkpoint.
    pub predictions: Vec<u8>,
}

impl RunResult {
    pub fn best_accuracy(&self) -> f64 {
        self.metrics.iter().filter_map(|m| m.test_acc).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn run_config(settings: &ExperimentSettings, key: &RunKey) -> TrainConfig {
    let mut config = TrainConfig {
        model: key.model.clone(),
        epochs: settings.epochs,
        seed: key.seed,
        subset: settings.subset,
        eval_every: 1,
        // Train accuracy on the full set would double the cost of every epoch.
        track_train_acc: false,
        select_by: Selection::TestAccuracy,
        out_dir: Some(run_dir(settings, key)),
        ..TrainConfig::default()
    };
    config.augment = AugmentConfig {
        translate_enabled: key.translate,
        rotate_enabled: key.rotate,
        ..AugmentConfig::default()
    };
    config
}

pub fn run_dir(settings: &ExperimentSettings, key: &RunKey) -> PathBuf {
    let subset = settings.subset.map_or("all".to_string(), |n| n.to_string());
    settings.out.join("runs").join(format!("{}_e{}_n{subset}", key.name(), settings.epochs))
}

/// Trains `key` unless its directory already holds a finished run with the
/// same manifest.
pub fn ensure_run(
    settings: &ExperimentSettings,
    key: &RunKey,
    train: &RawDataset,
    test: &RawDataset,
    digests: &BTreeMap<String, String>,
    log: &mut dyn FnMut(&str),
) -> Result<RunResult> {
    let config = run_config(settings, key);
    let dir = config.out_dir.clone().expect("run directory");
    let mut manifest = RunManifest::new("train", config.seed, config.to_kv());
    manifest.digests = digests.clone();
    let manifest_path = dir.join(RUN_MANIFEST);
    let predictions_path = dir.join(PREDICTIONS_FILE);

    let cached = fs::read_to_string(&manifest_path).map_or(false, |t| t == manifest.render())
        && predictions_path.exists()
        && dir.join(METRICS_FILE).exists();
    if cached {
        let metrics = read_metrics_csv(&dir.join(METRICS_FILE))?;
        let matrix = PredictionMatrix::read_csv(&predictions_path)?;
        let row = matrix.rows.into_iter().next().ok_or_else(|| Error::CorruptFile(format!("{} has no rows", predictions_path.display())))?;
        log(&format!("{}: cached", key.name()));
        return Ok(RunResult { key: key.clone(), metrics, predictions: row.labels });
    }

    // A stale manifest must not mark a half-written run as finished.
    let _ = fs::remove_file(&manifest_path);
    let name = key.name();
    let outcome = train_run_with(&config, train, test, &mut |m| {
        log(&format!(
            "{name}: epoch {} loss {:.4} test {}",
            m.epoch,
            m.mean_loss,
            m.test_acc.map_or("-".into(), |a| format!("{:.4}", a * 100.0))
        ))
    })?;
    let predictions = outcome
        .best_predictions
        .ok_or_else(|| Error::Config("run finished without a test evaluation".into()))?;
    let mut matrix = PredictionMatrix::new(test.labels().to_vec())?;
    matrix.upsert(&key.name(), &key.model, predictions.clone())?;
    matrix.write_csv(&predictions_path)?;
    manifest.save(&manifest_path)?;
    Ok(RunResult { key: key.clone(), metrics: outcome.metrics, predictions })
}

/// A rendered experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut widths = vec![0; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |row: &[String]| {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            format!("{}\n", cells.join("  ").trim_end())
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.header));
        out.push_str(&format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1))));
        for row in &self.rows {
            out.push_str(&line(row));
        }
        for note in &self.notes {
            let _ = writeln!(out, "{note}");
        }
        out
    }
}

fn pct(x: f64) -> String {
    format!("{:.4}", x * 100.0)
}

/// `mean ± half-width` in percent; a single value has no range.
fn ci(samples: &[f64]) -> String {
    match confidence_range_95(samples) {
        Ok((mean, half)) => format!("{} ± {:.4}", pct(mean), half * 100.0),
        Err(_) => samples.first().map_or("-".into(), |&x| format!("{} (n=1)", pct(x))),
    }
}

fn best(samples: &[f64]) -> String {
    best_of(samples).map_or("-".into(), |(_, b)| format!("{:.2}", b * 100.0))
}

/// Published numbers, shown beside ours.
pub fn reference(table: u8, row: &str) -> &'static str {
    match (table, row) {
        (1, "M3") | (4, "M3") => "99.5930±0.0136 / 99.6949±0.0058 / 99.7667±0.0084 / 99.82",
        (1, "M5") | (4, "M5") => "99.5863±0.0115 / 99.6835±0.0074 / 99.7583±0.0081 / 99.80",
        (1, "M7") => "99.5470±0.0288 / 99.6711±0.0089 / 99.7450±0.0093 / 99.79",
        (4, "C1") => "99.3052±0.0865 / 99.5293±0.0105 / 99.6419±0.0059 / 99.70",
        (4, "C2") => "99.3594±0.0442 / 99.5316±0.0090 / 99.6337±0.0051 / 99.68",
        (4, "C3") => "99.4720±0.04268 / 99.6448±0.0078 / 99.7372±0.0033 / 99.78",
        (2, "M3+M3+M3") => "99.7901±0.0014 / 99.86",
        (2, "M5+M5+M5") => "99.7925±0.0014 / 99.86",
        (2, "M7+M7+M7") => "99.7874±0.0014 / 99.85",
        (2, "M3+M5+M7") | (3, "individual") => "99.8014±0.0015 / 99.87",
        (3, "two-level random") => "99.8118±0.0002 / 99.89",
        (3, "two-level best") => "99.8646±0.0008 / 99.91",
        (5, "C1") => "99.6466±0.0121",
        (5, "C2") => "99.6406±0.0108",
        (5, "C3") => "99.7440±0.0080",
        (5, "M5") | (6, "✓ ✓") | (7, "all") => "99.7600±0.0089",
        (6, "✗ ✗") => "99.6783±0.0086",
        (6, "✓ ✗") => "99.7203±0.0074",
        (6, "✗ ✓") => "99.7327±0.0077",
        (7, "none") => "99.6337±0.0131",
        (7, "final") => "99.7050±0.0092",
        _ => "",
    }
}

/// Runs the networks a table needs and builds its report.
pub struct Experiment<'a> {
    pub settings: ExperimentSettings,
    pub train: &'a RawDataset,
    pub test: &'a RawDataset,
    pub digests: BTreeMap<String, String>,
}

impl<'a> Experiment<'a> {
    fn runs(&self, template: &RunKey, log: &mut dyn FnMut(&str)) -> Result<Vec<RunResult>> {
        (0..self.settings.nets as u64)
            .map(|k| {
                let key = RunKey { seed: self.settings.seed + k, ..template.clone() };
                ensure_run(&self.settings, &key, self.train, self.test, &self.digests, log)
            })
            .collect()
    }

    fn band_row(&self, label: &str, runs: &[RunResult]) -> Result<Vec<String>> {
        let (from, to) = self.settings.band();
        let bands = runs
            .iter()
            .map(|r| epoch_band_stats(&r.metrics, from, to))
            .collect::<Result<Vec<_>>>()?;
        let column = |f: fn(&crate::trainer::BandStats) -> f64| bands.iter().map(f).collect::<Vec<f64>>();
        let band_max = column(|b| b.max);
        Ok(vec![
            label.to_string(),
            ci(&column(|b| b.min)),
            ci(&column(|b| b.mean)),
            ci(&band_max),
            best(&band_max),
            reference(self.settings.table, label).to_string(),
        ])
    }

    fn best_row(&self, cells: Vec<String>, runs: &[RunResult], reference_key: &str) -> Vec<String> {
        let accs: Vec<f64> = runs.iter().map(RunResult::best_accuracy).collect();
        let mut row = cells;
        row.push(ci(&accs));
        row.push(reference(self.settings.table, reference_key).to_string());
        row
    }

    fn matrix(&self, groups: &[&[RunResult]]) -> Result<PredictionMatrix> {
        let mut matrix = PredictionMatrix::new(self.test.labels().to_vec())?;
        for run in groups.iter().flat_map(|g| g.iter()) {
            matrix.upsert(&run.key.name(), &run.key.model, run.predictions.clone())?;
        }
        Ok(matrix)
    }

    fn vote_row(&self, label: &str, matrix: &PredictionMatrix, strategy: Strategy) -> Result<Vec<String>> {
        let config = EnsembleConfig { trials: self.settings.trials, ..EnsembleConfig::new(strategy, self.settings.seed) };
        let dist = sample_ensembles(matrix, &config)?;
        Ok(vec![label.to_string(), ci(&dist.samples), best(&dist.samples)])
    }

    pub fn run(&self, log: &mut dyn FnMut(&str)) -> Result<Report> {
        let s = &self.settings;
        s.validate()?;
        let (from, to) = s.band();
        let scope = format!(
            "{} scale: {} networks per row, {} epochs, {} training images",
            s.scale.as_str(),
            s.nets,
            s.epochs,
            s.subset.map_or("all".to_string(), |n| n.to_string())
        );
        let band_header = |first: &str| {
            vec![
                first.to_string(),
                format!("min {from}-{to}"),
                format!("avg {from}-{to}"),
                format!("max {from}-{to}"),
                "best".to_string(),
                "published min / avg / max / best".to_string(),
            ]
        };
        let report = match s.table {
            1 | 4 => {
                let models: &[(&str, &str)] = if s.table == 1 {
                    &[("M3", "m3"), ("M5", "m5"), ("M7", "m7")]
                } else {
                    &[("C1", "c1"), ("C2", "c2"), ("C3", "c3"), ("M5", "m5")]
                };
                let mut rows = Vec::new();
                for (label, model) in models {
                    let runs = self.runs(&RunKey::new(model, 0), log)?;
                    rows.push(self.band_row(label, &runs)?);
                }
                let title = if s.table == 1 {
                    "Table 1: test accuracy of single networks over the epoch band (95% range)"
                } else {
                    "Table 4: test accuracy of max-pooling baselines and M5 over the epoch band (95% range)"
                };
                Report { title: title.into(), header: band_header("network"), rows, notes: vec![scope] }
            }
            2 | 3 => {
                let m3 = self.runs(&RunKey::new("m3", 0), log)?;
                let m5 = self.runs(&RunKey::new("m5", 0), log)?;
                let m7 = self.runs(&RunKey::new("m7", 0), log)?;
                let matrix = self.matrix(&[&m3, &m5, &m7])?;
                let strategies: Vec<(&str, Strategy)> = if s.table == 2 {
                    vec![
                        ("M3+M3+M3", Strategy::Homogeneous("m3".into())),
                        ("M5+M5+M5", Strategy::Homogeneous("m5".into())),
                        ("M7+M7+M7", Strategy::Homogeneous("m7".into())),
                        ("M3+M5+M7", Strategy::Heterogeneous),
                    ]
                } else {
                    vec![
                        ("individual", Strategy::Heterogeneous),
                        ("two-level random", Strategy::TwoLevel),
                        ("two-level best", Strategy::TwoLevelBest { top_k: DEFAULT_TOP_K }),
                    ]
                };
                let mut rows = Vec::new();
                for (label, strategy) in strategies {
                    let mut row = self.vote_row(label, &matrix, strategy)?;
                    row.push(reference(s.table, label).to_string());
                    rows.push(row);
                }
                let title = if s.table == 2 {
                    "Table 2: majority-vote ensembles of three networks (95% range over sampled ensembles)"
                } else {
                    "Table 3: ensembles of individual networks and ensembles of ensembles"
                };
                Report {
                    title: title.into(),
                    header: vec!["ensemble".into(), "accuracy".into(), "best".into(), "published range / best".into()],
                    rows,
                    notes: vec![scope, format!("{} sampled ensembles per row", s.trials)],
                }
            }
            5 => {
                let mut rows = Vec::new();
                for (label, model) in [("C1", "c1"), ("C2", "c2"), ("C3", "c3"), ("M5", "m5")] {
                    let runs = self.runs(&RunKey::new(model, 0), log)?;
                    rows.push(self.best_row(vec![label.into()], &runs, label));
                }
                Report {
                    title: "Table 5: best test accuracy per network (95% range)".into(),
                    header: vec!["network".into(), "accuracy".into(), "published".into()],
                    rows,
                    notes: vec![scope],
                }
            }
            6 => {
                let mut rows = Vec::new();
                for (translate, rotate) in [(false, false), (true, false), (false, true), (true, true)] {
                    let mark = |b: bool| if b { "✓" } else { "✗" };
                    let runs = self.runs(&RunKey { translate, rotate, ..RunKey::new("m5", 0) }, log)?;
                    let label = format!("{} {}", mark(translate), mark(rotate));
                    rows.push(self.best_row(vec![mark(translate).into(), mark(rotate).into()], &runs, &label));
                }
                Report {
                    title: "Table 6: M5 best test accuracy by augmentation (95% range)".into(),
                    header: vec!["translation".into(), "rotation".into(), "accuracy".into(), "published".into()],
                    rows,
                    notes: vec![scope],
                }
            }
            7 => {
                let mut rows = Vec::new();
                for (label, model) in [("none", "m5:none"), ("final", "m5:final"), ("all", "m5")] {
                    let runs = self.runs(&RunKey::new(model, 0), log)?;
                    rows.push(self.best_row(vec![label.into()], &runs, label));
                }
                Report {
                    title: "Table 7: M5 best test accuracy by batch-norm placement (95% range)".into(),
                    header: vec!["batch norm".into(), "accuracy".into(), "published".into()],
                    rows,
                    notes: vec![scope],
                }
            }
            other => return Err(Error::Config(format!("unknown table {other} (1 to 7)"))),
        };
        Ok(report)
    }
}

/// Writes `table<N>.txt` and the experiment manifest under `settings.out`.
pub fn save_report(settings: &ExperimentSettings, report: &Report, digests: &BTreeMap<String, String>) -> Result<PathBuf> {
    let out = &settings.out;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let path = out.join(format!("table{}.txt", settings.table));
    fs::write(&path, report.render()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let mut manifest = RunManifest::new("experiment", settings.seed, settings.to_kv());
    manifest.digests = digests.clone();
    manifest.save(&experiment_manifest_path(out, settings.table))?;
    Ok(path)
}

pub fn experiment_manifest_path(out: &Path, table: u8) -> PathBuf {
    out.join(format!("table{table}.manifest.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_names_are_filesystem_safe() {
        let key = RunKey { translate: false, ..RunKey::new("m5:none", 3) };
        assert_eq!(key.name(), "m5-none_t0r1_s3");
        let settings = ExperimentSettings { subset: Some(100), epochs: 2, out: "x".into(), ..Default::default() };
        assert_eq!(run_dir(&settings, &key), Path::new("x/runs/m5-none_t0r1_s3_e2_n100"));
        let config = run_config(&settings, &key);
        assert!(!config.augment.translate_enabled && config.augment.rotate_enabled);
        assert_eq!(config.model, "m5:none");
    }

    #[test]
    fn every_table_row_has_a_reference() {
        for (t, rows) in [
            (1, &["M3", "M5", "M7"][..]),
            (2, &["M3+M3+M3", "M5+M5+M5", "M7+M7+M7", "M3+M5+M7"]),
            (3, &["individual", "two-level random", "two-level best"]),
            (4, &["C1", "C2", "C3", "M5"]),
            (5, &["C1", "C2", "C3", "M5"]),
            (6, &["✗ ✗", "✓ ✗", "✗ ✓", "✓ ✓"]),
            (7, &["none", "final", "all"]),
        ] {
            for r in rows {
                assert!(!reference(t, r).is_empty(), "table {t} row {r}");
            }
        }
    }

    #[test]
    fn ci_formatting() {
        assert_eq!(ci(&[0.5]), "50.0000 (n=1)");
        assert_eq!(ci(&[0.5, 0.5]), "50.0000 ± 0.0000");
        assert_eq!(best(&[0.99, 0.9987]), "99.87");
    }

    #[test]
    fn report_alignment() {
        let r = Report {
            title: "T".into(),
            header: vec!["a".into(), "bbb".into()],
            rows: vec![vec!["xxxx".into(), "y".into()]],
            notes: vec![],
        };
        assert_eq!(r.render(), "T\na     bbb\n---------\nxxxx  y\n");
    }
}
