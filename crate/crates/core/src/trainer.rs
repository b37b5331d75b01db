//! The training loop: shuffle, augment, forward/backward, Adam, EMA, and a
//! per-epoch learning-rate decay, with evaluation on EMA weights.
//!
//! Best-model selection by test accuracy follows the reference recipe and
//! leaks the test set into model choice; [`Selection::TrainLoss`] avoids that.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{clean_batch, make_batches, AugmentConfig, Batch, RawDataset};
use crate::error::{Error, Result};
use crate::models::{save_checkpoint, Checkpoint, CheckpointMeta, Network, ParamEma, ParamSet};
use crate::nn::{argmax_rows, softmax_cross_entropy, Tensor};
use crate::optim::{AdamConfig, AdamState, LrSchedule, DEFAULT_EMA_DECAY};
use crate::rng::{derive_rng, stream};

pub const DEFAULT_EVAL_BATCH: usize = 500;

/// How the "best" checkpoint is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    TestAccuracy,
    TrainLoss,
}

impl Selection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Selection::TestAccuracy => "test_acc",
            Selection::TrainLoss => "train_loss",
        }
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_acc" | "test" => Ok(Selection::TestAccuracy),
            "train_loss" | "loss" => Ok(Selection::TrainLoss),
            other => Err(Error::Config(format!("unknown selection `{other}` (test_acc, train_loss)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Model name as accepted by [`crate::models::ModelSpec::from_name`].
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub lr: LrSchedule,
    pub ema_decay: f64,
    /// Average BN running statistics along with the weights.
    pub ema_include_bn: bool,
    /// Evaluate every this many epochs (and always after the last); 0 disables.
    pub eval_every: usize,
    /// Measure train accuracy on clean training images at each evaluation.
    pub track_train_acc: bool,
    pub save_best: bool,
    pub select_by: Selection,
    pub out_dir: Option<PathBuf>,
    /// Train on the first `n` training images only.
    pub subset: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: "m5".into(),
            epochs: 150,
            batch_size: 120,
            seed: 0,
            augment: AugmentConfig::default(),
            lr: LrSchedule::default(),
            ema_decay: DEFAULT_EMA_DECAY,
            ema_include_bn: true,
            eval_every: 1,
            track_train_acc: true,
            save_best: true,
            select_by: Selection::TestAccuracy,
            out_dir: None,
            subset: None,
            eval_batch: DEFAULT_EVAL_BATCH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} is below 2; batch norm needs two samples", self.batch_size)));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("evaluation batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} must lie in [0, 1)", self.ema_decay)));
        }
        if self.subset == Some(0) {
            return Err(Error::Config("subset must be positive".into()));
        }
        self.augment.validate()?;
        self.lr.validate()
    }

    fn evaluates_at(&self, epoch: usize) -> bool {
        self.eval_every > 0 && (epoch % self.eval_every == 0 || epoch == self.epochs)
    }
}

/// One row of the metrics log. Epochs are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Anything that maps a normalized image batch to logits.
pub trait Classifier {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// A network paired with the parameters (raw or EMA view) to evaluate.
pub struct EvalModel<'a> {
    pub net: &'a Network,
    pub params: &'a ParamSet,
}

impl Classifier for EvalModel<'_> {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.net.forward_eval(self.params, images)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<u8>,
}

/// Argmax predictions over the whole dataset (no augmentation), lowest class
/// index winning ties.
pub fn evaluate(model: &dyn Classifier, data: &RawDataset, batch_size: usize) -> Result<Evaluation> {
    evaluate_first(model, data, data.len(), batch_size)
}

fn evaluate_first(model: &dyn Classifier, data: &RawDataset, count: usize, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() || count == 0 {
        return Err(Error::EmptyDataset);
    }
    let count = count.min(data.len());
    let mut predictions = Vec::with_capacity(count);
    let indices: Vec<usize> = (0..count).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = clean_batch(data, chunk);
        predictions.extend(argmax_rows(&model.logits(&batch.images)?)?);
    }
    let correct = predictions.iter().zip(data.labels()).filter(|(p, t)| p == t).count();
    Ok(Evaluation { accuracy: correct as f64 / count as f64, predictions })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub correct: usize,
}

/// Model, optimizer and EMA state, advanced one batch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub params: ParamSet,
    pub adam: AdamState,
    pub ema: ParamEma,
}

impl Trainer {
    pub fn new(net: Network, seed: u64, ema_decay: f64, ema_include_bn: bool) -> Self {
        let params = net.init_params(&mut derive_rng(seed, &[stream::INIT]));
        let adam = AdamState::new(&params.values, AdamConfig::default());
        let ema = ParamEma::new(&params, ema_decay, ema_include_bn);
        Self { net, params, adam, ema }
    }

    /// Resumes from a checkpoint that carries optimizer and EMA state.
    pub fn from_checkpoint(net: Network, ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_against(&net)?;
        let adam = ckpt.adam.ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let ema = ckpt.ema.ok_or_else(|| Error::Config("checkpoint has no EMA state".into()))?;
        Ok(Self { net, params: ckpt.params, adam, ema })
    }

    /// Forward, backward, Adam step and EMA update on one batch.
    pub fn train_step(&mut self, batch: &Batch, lr: f64, epoch: usize) -> Result<StepStats> {
        let (logits, cache) = self.net.forward_train(&mut self.params, &batch.images)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: self.adam.t as usize, loss });
        }
        let correct = argmax_rows(&logits)?
            .iter()
            .zip(&batch.labels)
            .filter(|(p, t)| p == t)
            .count();
        let grads = self.net.backward(&self.params, cache, &grad)?;
        self.adam.step(&mut self.params.values, &grads, lr)?;
        self.ema.update(&self.params)?;
        Ok(StepStats { loss, correct })
    }

    pub fn ema_view(&self) -> Result<ParamSet> {
        self.ema.eval_view(&self.params)
    }

    pub fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut ckpt = Checkpoint::new(&self.net, self.params.clone(), meta);
        ckpt.adam = Some(self.adam.clone());
        ckpt.ema = Some(self.ema.clone());
        ckpt
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Option<Checkpoint>,
    /// EMA-weight test predictions after the last epoch, if evaluated.
    pub final_predictions: Option<Vec<u8>>,
    /// Test predictions at the epoch the best checkpoint was taken, if evaluated there.
    pub best_predictions: Option<Vec<u8>>,
}

pub fn train_run(config: &TrainConfig, train: &RawDataset, test: &RawDataset) -> Result<TrainOutcome> {
    train_run_with(config, train, test, &mut |_| {})
}

/// As [`train_run`], calling `on_epoch` after every epoch.
pub fn train_run_with(
    config: &TrainConfig,
    train: &RawDataset,
    test: &RawDataset,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let net = Network::from_name(&config.model)?;
    let train = match config.subset {
        Some(n) if n < train.len() => train.head(n),
        _ => train.clone(),
    };
    if train.len() < 2 {
        return Err(Error::EmptyDataset);
    }

    let mut trainer = Trainer::new(net, config.seed, config.ema_decay, config.ema_include_bn);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint, Option<Vec<u8>>)> = None;
    let mut final_predictions = None;

    for epoch in 1..=config.epochs {
        let lr = config.lr.lr_at(epoch - 1);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for batch in make_batches(&train, config.batch_size, config.augment, config.seed, epoch - 1)? {
            // A trailing batch of one cannot be batch-normalized.
            if batch.labels.len() < 2 {
                continue;
            }
            let stats = trainer.train_step(&batch, lr, epoch)?;
            loss_sum += stats.loss as f64 * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let mean_loss = loss_sum / seen as f64;

        let (mut train_acc, mut test_acc, mut predictions) = (None, None, None);
        if config.evaluates_at(epoch) {
            let view = trainer.ema_view()?;
            let model = EvalModel { net: &trainer.net, params: &view };
            let eval = evaluate(&model, test, config.eval_batch)?;
            test_acc = Some(eval.accuracy);
            predictions = Some(eval.predictions);
            if config.track_train_acc {
                train_acc = Some(evaluate(&model, &train, config.eval_batch)?.accuracy);
            }
        }
        let row = EpochMetrics { epoch, lr, mean_loss, train_acc, test_acc };
        on_epoch(&row);
        metrics.push(row);

        if config.save_best {
            let score = match config.select_by {
                Selection::TestAccuracy => test_acc,
                Selection::TrainLoss => Some(-mean_loss),
            };
            if let Some(score) = score {
                if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                    let meta = CheckpointMeta { epoch: epoch as u64, seed: config.seed, test_accuracy: test_acc };
                    best = Some((score, trainer.checkpoint(meta), predictions.clone()));
                }
            }
        }
        if epoch == config.epochs {
            final_predictions = predictions;
        }
    }

    let last = metrics.last().expect("at least one epoch");
    let final_checkpoint = trainer.checkpoint(CheckpointMeta {
        epoch: config.epochs as u64,
        seed: config.seed,
        test_accuracy: last.test_acc,
    });
    let (best_checkpoint, best_predictions) = match best {
        Some((_, c, p)) => (Some(c), p),
        None => (None, None),
    };
    let outcome = TrainOutcome { metrics, final_checkpoint, best_checkpoint, final_predictions, best_predictions };
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn write_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_metrics_csv(&dir.join(METRICS_FILE), &outcome.metrics)?;
    save_checkpoint(&dir.join(FINAL_CHECKPOINT), &outcome.final_checkpoint)?;
    if let Some(best) = &outcome.best_checkpoint {
        save_checkpoint(&dir.join(BEST_CHECKPOINT), best)?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: `epoch,lr,mean_loss,train_acc,test_acc_ema`; missing values are empty.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "mean_loss", "train_acc", "test_acc_ema"])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.lr.to_string(),
            m.mean_loss.to_string(),
            opt(m.train_acc),
            opt(m.test_acc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::CorruptFile(format!("bad number `{s}` in metrics")))
        }
    };
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| record.get(i).ok_or_else(|| Error::CorruptFile("short metrics row".into()));
        let num = |i: usize| -> Result<f64> {
            parse_opt(field(i)?)?.ok_or_else(|| Error::CorruptFile("missing metrics value".into()))
        };
        out.push(EpochMetrics {
            epoch: num(0)? as usize,
            lr: num(1)?,
            mean_loss: num(2)?,
            train_acc: parse_opt(field(3)?)?,
            test_acc: parse_opt(field(4)?)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Min, mean and max test accuracy over epochs `from..=to` (1-based).
/// Every epoch in the band must have a recorded test accuracy.
pub fn epoch_band_stats(metrics: &[EpochMetrics], from: usize, to: usize) -> Result<BandStats> {
    if from > to || from == 0 {
        return Err(Error::BandOutOfRange { from, to });
    }
    let mut values = Vec::with_capacity(to - from + 1);
    for epoch in from..=to {
        let acc = metrics
            .iter()
            .find(|m| m.epoch == epoch)
            .and_then(|m| m.test_acc)
            .ok_or(Error::BandOutOfRange { from, to })?;
        values.push(acc);
    }
    Ok(BandStats {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Trains on one fixed batch until every sample is classified correctly by
/// the train-mode forward pass, or `max_steps` is reached. Returns the number
/// of steps taken when it succeeded.
pub fn overfit_batch(trainer: &mut Trainer, batch: &Batch, lr: f64, max_steps: usize) -> Result<Option<usize>> {
    for step in 1..=max_steps {
        let stats = trainer.train_step(batch, lr, 0)?;
        // `correct` is measured before this step's update.
        if stats.correct == batch.labels.len() {
            return Ok(Some(step - 1));
        }
    }
    let (logits, _) = trainer.net.forward_train(&mut trainer.params.clone(), &batch.images)?;
    let all = argmax_rows(&logits)?.iter().zip(&batch.labels).all(|(p, t)| p == t);
    Ok(all.then_some(max_steps))
}
