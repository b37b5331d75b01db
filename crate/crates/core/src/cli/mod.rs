//! Command-line front end.
//!
//! Every command resolves its settings as defaults, then `--config` (a plain
//! settings file or a manifest written by an earlier run), then flags. The
//! resolved settings are written back as a [`RunManifest`] next to the
//! command's output, together with SHA-256 digests of its inputs.

pub mod config;
pub mod experiment;
pub mod fetch;
pub mod settings;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{data_dir, RawDataset};
use crate::ensemble::{export_distribution_csv, sample_ensembles, EnsembleConfig, PredictionMatrix};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, BnMode, ModelSpec, Network};
use crate::nn::gradcheck::run_suite;
use crate::trainer::{evaluate, train_run_with, EvalModel, TrainConfig};

pub use config::{KvConfig, RunManifest, Settings};
pub use experiment::{Experiment, Report};
pub use fetch::{fetch_data, FetchStatus, MNIST_FILES};
pub use settings::{EvalSettings, ExperimentSettings, FetchSettings, GradcheckSettings, Scale, VoteSettings, WeightView};

pub const RUN_MANIFEST: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "simplecnn", version, about = "Train and ensemble padding-free CNNs on MNIST")]
pub struct Cli {
    /// Directory holding the four IDX files (default: $SIMPLECNN_DATA, else the workspace data/ directory).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Verify the MNIST files, downloading any that are missing.
    FetchData(FetchArgs),
    /// Train one network.
    Train(TrainArgs),
    /// Evaluate a checkpoint and store its predictions in a matrix.
    Eval(EvalArgs),
    /// Sample majority-vote ensembles from a prediction matrix.
    Vote(VoteArgs),
    /// Reproduce one of the result tables.
    Experiment(ExperimentArgs),
    /// Check every layer's backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Files are fetched from `<base-url><name>.gz`.
    #[arg(long)]
    pub base_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// m3, m5, m7, c1, c2 or c3, optionally with :all, :final or :none.
    pub model: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub no_translate: bool,
    #[arg(long)]
    pub no_rotate: bool,
    /// all, final or none.
    #[arg(long)]
    pub bn_mode: Option<BnMode>,
    /// Train on the first N training images.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Output directory (default: runs/<model>_s<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    /// Keep BN running statistics out of the weight average.
    #[arg(long)]
    pub ema_exclude_bn: bool,
    /// Evaluate every N epochs (0: never).
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub no_train_acc: bool,
    /// test_acc or train_loss.
    #[arg(long)]
    pub select_by: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate the averaged weights (default).
    #[arg(long, conflicts_with = "raw")]
    pub ema: bool,
    /// Evaluate the raw weights.
    #[arg(long)]
    pub raw: bool,
    /// Prediction matrix CSV to update.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Row id (default: <run dir>/<checkpoint stem>:<ema|raw>).
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct VoteArgs {
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// homogeneous:<type>, heterogeneous, two-level or two-level-best[:k].
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Score every possible ensemble instead of sampling.
    #[arg(long)]
    pub exhaustive: bool,
    /// The three types used by cross-type strategies, comma-separated.
    #[arg(long)]
    pub types: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Distribution CSV; raw samples go to <stem>_samples.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(value_parser = clap::value_parser!(u8).range(1..=7))]
    pub table: Option<u8>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// desk (3 networks, 15 epochs) or full (30 networks, 150 epochs).
    #[arg(long)]
    pub scale: Option<Scale>,
    #[arg(long)]
    pub nets: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub band_from: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random instances per layer kind.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let data = cli.data_dir.clone().unwrap_or_else(data_dir);
    match cli.command {
        Command::FetchData(a) => cmd_fetch(a, &data, out),
        Command::Train(a) => cmd_train(a, &data, out),
        Command::Eval(a) => cmd_eval(a, &data, out),
        Command::Vote(a) => cmd_vote(a, out),
        Command::Experiment(a) => cmd_experiment(a, &data, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("writing output", e))
}

/// Defaults, then the `--config` file, then `flags`.
fn resolve<S: Settings>(command: &str, config: Option<&Path>, flags: &KvConfig) -> Result<(S, Option<RunManifest>)> {
    let mut settings = S::default();
    let mut manifest = None;
    if let Some(path) = config {
        let (kv, m) = config::load_settings_file(path, command)?;
        settings.apply_all(&kv)?;
        manifest = m;
    }
    settings.apply_all(flags)?;
    Ok((settings, manifest))
}

fn set_opt<T: std::fmt::Display>(kv: &mut KvConfig, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        kv.set(key, v);
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e)),
        None => Ok(()),
    }
}

fn data_paths(dir: &Path) -> Vec<PathBuf> {
    fetch::data_files(dir)
}

fn load_data(dir: &Path) -> Result<(RawDataset, RawDataset)> {
    Ok((RawDataset::load_train(dir)?, RawDataset::load_test(dir)?))
}

fn digests_of(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut m = RunManifest::new("", 0, KvConfig::new());
    for p in paths {
        m.add_digest(p)?;
    }
    Ok(m.digests)
}

fn cmd_fetch(a: FetchArgs, data: &Path, out: &mut dyn Write) -> Result<()> {
    let mut flags = KvConfig::new();
    flags.set("dir", data.display());
    set_opt(&mut flags, "base_url", &a.base_url);
    let (s, _) = resolve::<FetchSettings>("fetch-data", a.config.as_deref(), &flags)?;
    for (path, status) in fetch_data(&s.dir, &s.base_url)? {
        let what = match status {
            FetchStatus::Present => "ok",
            FetchStatus::Downloaded => "downloaded",
        };
        say(out, format!("{what:>10}  {}", path.display()))?;
    }
    let mut manifest = RunManifest::new("fetch-data", 0, s.to_kv());
    manifest.digests = digests_of(&data_paths(&s.dir))?;
    manifest.save(&s.dir.join("fetch.manifest.txt"))
}

/// `m5` + `none` -> `m5:none`; a mode given as a flag replaces one in the name.
fn model_name(model: &str, bn_mode: Option<BnMode>) -> Result<String> {
    let spec = ModelSpec::from_name(model)?;
    let spec = match bn_mode {
        Some(mode) => spec.with_bn_mode(mode),
        None => spec,
    };
    Ok(spec.id())
}

fn cmd_train(a: TrainArgs, data: &Path, out: &mut dyn Write) -> Result<()> {
    let mut flags = KvConfig::new();
    set_opt(&mut flags, "model", &a.model);
    set_opt(&mut flags, "epochs", &a.epochs);
    set_opt(&mut flags, "seed", &a.seed);
    set_opt(&mut flags, "batch_size", &a.batch_size);
    set_opt(&mut flags, "subset", &a.subset);
    set_opt(&mut flags, "out_dir", &a.out.as_ref().map(|p| p.display()));
    set_opt(&mut flags, "base_lr", &a.lr);
    set_opt(&mut flags, "lr_gamma", &a.lr_gamma);
    set_opt(&mut flags, "ema_decay", &a.ema_decay);
    set_opt(&mut flags, "eval_every", &a.eval_every);
    set_opt(&mut flags, "select_by", &a.select_by);
    if a.no_translate {
        flags.set("translate", false);
    }
    if a.no_rotate {
        flags.set("rotate", false);
    }
    if a.ema_exclude_bn {
        flags.set("ema_include_bn", false);
    }
    if a.no_train_acc {
        flags.set("track_train_acc", false);
    }
    let (mut config, manifest) = resolve::<TrainConfig>("train", a.config.as_deref(), &flags)?;
    if a.model.is_none() && a.config.is_none() {
        return Err(Error::Config("no model given (positional MODEL or --config)".into()));
    }
    config.model = model_name(&config.model, a.bn_mode)?;
    if config.out_dir.is_none() {
        config.out_dir = Some(PathBuf::from("runs").join(format!("{}_s{}", config.model.replace(':', "-"), config.seed)));
    }
    config.validate()?;

    let inputs = data_paths(data);
    if let Some(m) = &manifest {
        m.verify_inputs(&inputs)?;
    }
    let (train, test) = load_data(data)?;
    let spec = ModelSpec::from_name(&config.model)?;
    say(out, format!("model {}", spec.describe()))?;
    let outcome = train_run_with(&config, &train, &test, &mut |m| {
        let acc = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.4}", v * 100.0));
        let _ = writeln!(
            out,
            "epoch {:>4}  lr {:.6}  loss {:.5}  train {}  test {}",
            m.epoch,
            m.lr,
            m.mean_loss,
            acc(m.train_acc),
            acc(m.test_acc)
        );
    })?;
    let dir = config.out_dir.clone().expect("output directory");
    if let Some(best) = &outcome.best_checkpoint {
        say(out, format!("best epoch {}  test {:?}", best.meta.epoch, best.meta.test_accuracy.map(|a| a * 100.0)))?;
    }
    let mut manifest = RunManifest::new("train", config.seed, config.to_kv());
    manifest.digests = digests_of(&inputs)?;
    manifest.save(&dir.join(RUN_MANIFEST))?;
    say(out, format!("wrote {}", dir.display()))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

fn cmd_eval(a: EvalArgs, data: &Path, out: &mut dyn Write) -> Result<()> {
    let mut flags = KvConfig::new();
    set_opt(&mut flags, "checkpoint", &a.checkpoint.as_ref().map(|p| p.display()));
    set_opt(&mut flags, "matrix", &a.matrix.as_ref().map(|p| p.display()));
    set_opt(&mut flags, "id", &a.id);
    if a.raw {
        flags.set("weights", "raw");
    } else if a.ema {
        flags.set("weights", "ema");
    }
    let (mut s, manifest) = resolve::<EvalSettings>("eval", a.config.as_deref(), &flags)?;
    if s.checkpoint.as_os_str().is_empty() {
        return Err(Error::Config("no checkpoint given".into()));
    }
    let mut inputs = data_paths(data)[2..].to_vec();
    inputs.push(s.checkpoint.clone());
    if let Some(m) = &manifest {
        m.verify_inputs(&inputs)?;
    }

    let ckpt = load_checkpoint(&s.checkpoint)?;
    let net = Network::from_name(&ckpt.model)?;
    ckpt.check_against(&net)?;
    let params = match s.weights {
        WeightView::Raw => ckpt.params.clone(),
        WeightView::Ema => ckpt
            .ema
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no EMA state; use --raw".into()))?
            .eval_view(&ckpt.params)?,
    };
    let test = RawDataset::load_test(data)?;
    let eval = evaluate(&EvalModel { net: &net, params: &params }, &test, s.eval_batch)?;

    let id = s.row_id();
    let mut matrix = PredictionMatrix::open_or_new(&s.matrix, test.labels())?;
    let replaced = matrix.upsert(&id, &ckpt.model, eval.predictions)?;
    ensure_parent(&s.matrix)?;
    matrix.write_csv(&s.matrix)?;
    say(
        out,
        format!(
            "{id}: accuracy {:.4}% ({} row in {})",
            eval.accuracy * 100.0,
            if replaced { "replaced" } else { "added" },
            s.matrix.display()
        ),
    )?;

    s.id = Some(id.clone());
    let mut manifest = RunManifest::new("eval", ckpt.meta.seed, s.to_kv());
    manifest.digests = digests_of(&inputs)?;
    let stem = s.matrix.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.save(&s.matrix.with_file_name(format!("{stem}.{}.manifest.txt", sanitize(&id))))
}

fn cmd_vote(a: VoteArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = KvConfig::new();
    set_opt(&mut flags, "matrix", &a.matrix.as_ref().map(|p| p.display()));
    set_opt(&mut flags, "strategy", &a.strategy);
    set_opt(&mut flags, "trials", &a.trials);
    set_opt(&mut flags, "seed", &a.seed);
    set_opt(&mut flags, "types", &a.types);
    set_opt(&mut flags, "bins", &a.bins);
    set_opt(&mut flags, "out", &a.out.as_ref().map(|p| p.display()));
    if a.exhaustive {
        flags.set("exhaustive", true);
    }
    let (s, manifest) = resolve::<VoteSettings>("vote", a.config.as_deref(), &flags)?;
    let inputs = vec![s.matrix.clone()];
    if let Some(m) = &manifest {
        m.verify_inputs(&inputs)?;
    }
    let matrix = PredictionMatrix::read_csv(&s.matrix)?;
    let config = EnsembleConfig {
        strategy: s.strategy.clone(),
        types: s.types.clone(),
        trials: s.trials,
        seed: s.seed,
        exhaustive: s.exhaustive,
        bins: s.bins,
    };
    let dist = sample_ensembles(&matrix, &config)?;
    ensure_parent(&s.out)?;
    export_distribution_csv(&dist, &s.out)?;
    let (best, members) = dist.best()?;
    let range = dist.ci_half_width.map_or("-".to_string(), |h| format!("{:.4}", h * 100.0));
    say(out, "strategy                 ensembles  mean      ± 95%    best")?;
    say(
        out,
        format!(
            "{:<24} {:>9}  {:.4}  {:>7}  {:.2}",
            s.strategy.to_string(),
            dist.samples.len(),
            dist.mean * 100.0,
            range,
            best * 100.0
        ),
    )?;
    say(out, format!("best ensemble: {}", members.join(" ")))?;

    let mut manifest = RunManifest::new("vote", s.seed, s.to_kv());
    manifest.digests = digests_of(&inputs)?;
    let stem = s.out.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.save(&s.out.with_file_name(format!("{stem}.manifest.txt")))
}

fn cmd_experiment(a: ExperimentArgs, data: &Path, out: &mut dyn Write) -> Result<()> {
    let mut base = KvConfig::new();
    let mut flags = KvConfig::new();
    // The scale picks the preset that the remaining flags refine.
    if let Some(scale) = a.scale {
        let (nets, epochs) = scale.preset();
        base.set("scale", scale.as_str());
        base.set("nets", nets);
        base.set("epochs", epochs);
    }
    set_opt(&mut flags, "table", &a.table);
    set_opt(&mut flags, "nets", &a.nets);
    set_opt(&mut flags, "epochs", &a.epochs);
    set_opt(&mut flags, "subset", &a.subset);
    set_opt(&mut flags, "seed", &a.seed);
    set_opt(&mut flags, "trials", &a.trials);
    set_opt(&mut flags, "band_from", &a.band_from);
    set_opt(&mut flags, "out", &a.out.as_ref().map(|p| p.display()));
    base.merge(&flags);
    let (s, manifest) = resolve::<ExperimentSettings>("experiment", a.config.as_deref(), &base)?;
    if a.table.is_none() && a.config.is_none() {
        return Err(Error::Config("no table given (1 to 7)".into()));
    }
    s.validate()?;
    let inputs = data_paths(data);
    if let Some(m) = &manifest {
        m.verify_inputs(&inputs)?;
    }
    let (train, test) = load_data(data)?;
    let digests = digests_of(&inputs)?;
    let experiment = Experiment { settings: s.clone(), train: &train, test: &test, digests: digests.clone() };
    let report = experiment.run(&mut |line| eprintln!("{line}"))?;
    say(out, report.render())?;
    let path = experiment::save_report(&s, &report, &digests)?;
    say(out, format!("wrote {}", path.display()))
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = KvConfig::new();
    set_opt(&mut flags, "seeds", &a.seeds);
    set_opt(&mut flags, "step", &a.step);
    set_opt(&mut flags, "tolerance", &a.tolerance);
    set_opt(&mut flags, "out", &a.out.as_ref().map(|p| p.display()));
    let (s, _) = resolve::<GradcheckSettings>("gradcheck", a.config.as_deref(), &flags)?;
    let reports = run_suite(s.seeds, s.step)?;
    std::fs::create_dir_all(&s.out).map_err(|e| Error::io(format!("creating {}", s.out.display()), e))?;
    let csv_path = s.out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["op", "input", "max_rel_error", "max_abs_error"])?;
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut failed = 0;
    for r in &reports {
        for e in &r.entries {
            w.write_record([r.op.as_str(), e.input.as_str(), &e.max_rel_error.to_string(), &e.max_abs_error.to_string()])?;
        }
        let kind = r.op.split(" seed=").next().unwrap_or(&r.op).to_string();
        let slot = worst.entry(kind).or_insert(0.0);
        *slot = slot.max(r.max_rel_error());
        if !r.passes(s.tolerance) {
            failed += 1;
            say(out, format!("FAIL {}: max relative error {:.3e}", r.op, r.max_rel_error()))?;
        }
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    for (kind, err) in &worst {
        let verdict = if *err < s.tolerance { "ok" } else { "FAIL" };
        say(out, format!("{kind:<24} worst relative error {err:.3e}  {verdict}"))?;
    }
    RunManifest::new("gradcheck", 0, s.to_kv()).save(&s.out.join(RUN_MANIFEST))?;
    if failed > 0 {
        return Err(Error::GradCheckFailed { failed, total: reports.len() });
    }
    say(out, format!("{} cases within {:e}", reports.len(), s.tolerance))
}
