//! Losses, the Adam optimizer and the segmentation and grading training
//! loops with early stopping.

mod adam;
mod history;
mod loss;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use history::{EpochRecord, History};
pub use loss::{bce_loss, categorical_ce, one_hot, softmax_cross_entropy};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::metrics::{dice, threshold};
use crate::models::{
    argmax, classify, hybrid_checkpoint, nest, segment, stack, unet_checkpoint, Checkpoint, Hybrid, HybridConfig,
    Segmenter, UNet, UNetConfig, DEFAULT_THRESHOLD,
};
use crate::params::{Ctx, Mode, ParamStore};
use crate::preprocess::{augment, AugmentConfig, Volume};
use crate::seed::derive_seed;
use crate::volcore::{Tape, Tensor};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Segmentation => "segmentation",
            Task::Classification => "classification",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(Task::Segmentation),
            "classification" => Ok(Task::Classification),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement of the monitored quantity before stopping;
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    /// Stop as soon as validation Dice (segmentation) or accuracy
    /// (classification) reaches this value.
    pub target: Option<f64>,
    pub seed: u64,
    /// `None` trains on the volumes as given.
    pub augment: Option<AugmentConfig>,
}

impl TrainRunConfig {
    pub fn segmentation(seed: u64) -> Self {
        TrainRunConfig {
            task: Task::Segmentation,
            lr: 0.001,
            batch_size: 16,
            max_epochs: 100,
            patience: Some(10),
            target: None,
            seed,
            augment: Some(AugmentConfig { seed, ..AugmentConfig::default() }),
        }
    }

    pub fn classification(seed: u64) -> Self {
        TrainRunConfig {
            task: Task::Classification,
            lr: 0.0005,
            batch_size: 8,
            max_epochs: 150,
            patience: Some(15),
            ..Self::segmentation(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == Some(0) {
            return Err(Error::Config("batch_size, max_epochs and patience must be at least 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Keys relative to a `train.` section; augmentation settings nest
    /// under `augment.`.
    pub fn to_kv(&self) -> KvConfig {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut kv = KvConfig::new();
        kv.set("task", self.task);
        kv.set("lr", self.lr);
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("patience", opt(self.patience.map(|p| p.to_string())));
        kv.set("target", opt(self.target.map(|t| t.to_string())));
        kv.set("seed", self.seed);
        match &self.augment {
            Some(a) => {
                kv.set("augment", "on");
                nest(&mut kv, "augment", &a.to_kv());
            }
            None => kv.set("augment", "off"),
        }
        kv
    }

    /// Missing keys take the defaults of the task named by `task`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut own = KvConfig::new();
        for (k, v) in kv.entries().iter().filter(|(k, _)| !k.starts_with("augment.")) {
            own.set(k, v);
        }
        let augment_section = kv.section("augment");
        let cfg = own.read(|r| {
            let task: Task = r.parse_or("task", Task::Segmentation)?;
            let seed = r.parse_or("seed", 0)?;
            let d = match task {
                Task::Segmentation => Self::segmentation(seed),
                Task::Classification => Self::classification(seed),
            };
            let optional = |key: &str, default: Option<String>| -> Option<String> {
                let s = r.string_or(key, default.as_deref().unwrap_or("none"));
                (s != "none").then_some(s)
            };
            let patience = optional("patience", d.patience.map(|p| p.to_string()))
                .map(|s| s.parse().map_err(|_| Error::Config(format!("`patience`: cannot parse `{s}`"))))
                .transpose()?;
            let target = optional("target", None)
                .map(|s| s.parse().map_err(|_| Error::Config(format!("`target`: cannot parse `{s}`"))))
                .transpose()?;
            let augment = match r.string_or("augment", "on").as_str() {
                "on" => {
                    let mut section = augment_section.clone();
                    if section.get("seed").is_none() {
                        section.set("seed", seed);
                    }
                    Some(AugmentConfig::from_kv(&section)?)
                }
                "off" if augment_section.entries().is_empty() => None,
                "off" => return Err(Error::Config("augment.* keys given while augment = off".into())),
                other => return Err(Error::Config(format!("`augment`: expected on or off, got `{other}`"))),
            };
            Ok(TrainRunConfig {
                task,
                lr: r.parse_or("lr", d.lr)?,
                batch_size: r.parse_or("batch_size", d.batch_size)?,
                max_epochs: r.parse_or("max_epochs", d.max_epochs)?,
                patience,
                target,
                seed,
                augment,
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn augmentation(&self) -> Option<&AugmentConfig> {
        self.augment.as_ref().filter(|a| !a.is_identity())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop { epochs_without_improvement: usize },
    TargetReached,
    /// A loss or gradient became non-finite; the returned parameters are
    /// the best ones seen before that.
    Diverged { epoch: usize, reason: String },
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxEpochs => f.write_str("max_epochs"),
            StopReason::EarlyStop {
                epochs_without_improvement,
            } => write!(f, "early_stop ({epochs_without_improvement} epochs without improvement)"),
            StopReason::TargetReached => f.write_str("target_reached"),
            StopReason::Diverged { epoch, reason } => write!(f, "diverged at epoch {epoch}: {reason}"),
        }
    }
}

/// Parameters of the best epoch together with the full log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    /// 0 when no epoch completed, so the initial parameters are returned.
    pub best_epoch: usize,
    pub history: History,
    pub stop: StopReason,
    pub optimizer_steps: u64,
}

#[derive(Clone, Debug)]
pub struct SegTraining {
    pub net: UNet,
    pub config: TrainRunConfig,
    pub outcome: TrainOutcome,
}

impl SegTraining {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = KvConfig::new();
        nest(&mut extra, "train", &self.config.to_kv());
        extra.set("best_epoch", self.outcome.best_epoch);
        unet_checkpoint(&self.net, &self.outcome.store, &extra)
    }
}

#[derive(Clone, Debug)]
pub struct ClsTraining {
    pub net: Hybrid,
    pub config: TrainRunConfig,
    pub threshold: f32,
    pub handoff: crate::models::HandoffMode,
    pub outcome: TrainOutcome,
}

impl ClsTraining {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = KvConfig::new();
        nest(&mut extra, "train", &self.config.to_kv());
        extra.set("handoff.threshold", self.threshold);
        extra.set("handoff.mode", self.handoff);
        extra.set("best_epoch", self.outcome.best_epoch);
        hybrid_checkpoint(&self.net, &self.outcome.store, &extra)
    }
}

#[derive(Clone, Debug)]
pub struct SegExample {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
}

#[derive(Clone, Debug)]
pub struct ClsExample {
    pub id: String,
    pub image: Volume,
    pub grade: usize,
}

/// Validation loss and metric for one epoch.
struct Scores {
    loss: f64,
    metric: f64,
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

/// Splits `order` into batches of `size`; a trailing batch smaller than
/// `min` joins the one before it.
fn batches(order: &[usize], size: usize, min: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let start = (out.len() - 2) * size;
        out.pop();
        out.pop();
        out.push(&order[start..]);
    }
    out
}

/// The loop shared by both tasks. `step` must accumulate gradients for the
/// given batch of training indices into the store and return the summed
/// loss; `validate` scores the current parameters.
fn run_loop(
    cfg: &TrainRunConfig,
    store: &mut ParamStore<f32>,
    n_train: usize,
    min_batch: usize,
    mut step: impl FnMut(&mut ParamStore<f32>, &[usize], usize) -> Result<f64>,
    mut validate: impl FnMut(&ParamStore<f32>) -> Result<Scores>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let better = |a: &Scores, b: &Scores| match cfg.task {
        Task::Segmentation => a.loss < b.loss,
        Task::Classification => a.metric > b.metric || (a.metric == b.metric && a.loss < b.loss),
    };
    let mut adam = AdamState::new(store, cfg.lr);
    let mut history = History::new(cfg.task);
    let mut best: Option<Scores> = None;
    let mut best_store = store.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, SHUFFLE_STREAM, epoch as u64])));
        let mut total = 0.0;
        let mut epoch_result = Ok(());
        for batch in batches(&order, cfg.batch_size, min_batch) {
            store.zero_grads();
            let r = step(store, batch, epoch).and_then(|loss| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "training loss" });
                }
                total += loss;
                adam_step(store, &mut adam)
            });
            if let Err(e) = r {
                epoch_result = Err(e);
                break;
            }
        }
        let scores = epoch_result.and_then(|_| validate(store)).and_then(|s| {
            if s.loss.is_finite() {
                Ok(s)
            } else {
                Err(Error::NonFinite { op: "validation loss" })
            }
        });
        let scores = match scores {
            Ok(s) => s,
            Err(e) if is_numeric_failure(&e) => {
                log::warn!("epoch {epoch}: {e}; keeping epoch {best_epoch}");
                stop = StopReason::Diverged {
                    epoch,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            train_loss: total / n_train as f64,
            val_loss: scores.loss,
            val_metric: scores.metric,
            lr: cfg.lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} {} {:.4}",
            total / n_train as f64,
            scores.loss,
            History::metric_name(cfg.task),
            scores.metric
        );
        let reached = cfg.target.is_some_and(|t| scores.metric >= t);
        if best.as_ref().is_none_or(|b| better(&scores, b)) {
            best = Some(scores);
            best_store = store.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        if reached {
            stop = StopReason::TargetReached;
            break;
        }
        if cfg.patience.is_some_and(|p| stale >= p) {
            stop = StopReason::EarlyStop {
                epochs_without_improvement: stale,
            };
            break;
        }
    }
    Ok(TrainOutcome {
        store: best_store,
        best_epoch,
        history,
        stop,
        optimizer_steps: adam.t,
    })
}

fn check_sets<E>(train: &[E], val: &[E]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    Ok(())
}

fn init_rng(cfg: &TrainRunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, INIT_STREAM]))
}

/// Mean BCE and mean per-case Dice of thresholded predictions.
pub fn segmentation_scores(net: &UNet, store: &ParamStore<f32>, examples: &[SegExample], batch: usize) -> Result<(f64, f64)> {
    let images: Vec<_> = examples.iter().map(|e| e.image.tensor()).collect();
    let probs = segment(net, store, &images, batch)?;
    let (mut loss, mut score) = (0.0, 0.0);
    for (p, e) in probs.into_iter().zip(examples) {
        let tape = Tape::new();
        loss += bce_loss(tape.constant(p.clone()), e.mask.tensor())?.value().item() as f64;
        score += dice(&threshold(&p, DEFAULT_THRESHOLD), e.mask.tensor())?;
    }
    let n = examples.len() as f64;
    Ok((loss / n, score / n))
}

/// Trains a fresh U-Net, minimizing BCE, with early stopping on the
/// validation loss.
/// Mean foreground fraction of the training masks, kept away from 0 and 1.
fn foreground_fraction(train: &[SegExample]) -> f64 {
    let (fg, total) = train.iter().fold((0.0, 0usize), |(fg, n), e| {
        let d = e.mask.tensor().data();
        (fg + d.iter().map(|&v| v as f64).sum::<f64>(), n + d.len())
    });
    (fg / total.max(1) as f64).clamp(1e-3, 1.0 - 1e-3)
}

pub fn train_segmentation(
    train: &[SegExample],
    val: &[SegExample],
    net_cfg: UNetConfig,
    cfg: &TrainRunConfig,
) -> Result<SegTraining> {
    check_sets(train, val)?;
    if cfg.task != Task::Segmentation {
        return Err(Error::Config("train_segmentation needs task = segmentation".into()));
    }
    let mut store = ParamStore::new();
    let net = UNet::new(&mut store, net_cfg, &mut init_rng(cfg))?;
    net.set_output_prior(&mut store, foreground_fraction(train))?;
    let aug = cfg.augmentation();
    let step = |store: &mut ParamStore<f32>, batch: &[usize], epoch: usize| -> Result<f64> {
        let mut images = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for &i in batch {
            let e = &train[i];
            match aug {
                Some(a) => {
                    let (im, m) = augment(&e.image, &e.mask, a, &mut a.rng_for(i as u64, epoch as u64))?;
                    images.push(im.into_tensor());
                    masks.push(m.into_tensor());
                }
                None => {
                    images.push(e.image.tensor().clone());
                    masks.push(e.mask.tensor().clone());
                }
            }
        }
        let x = stack(&images.iter().collect::<Vec<_>>())?;
        let y = stack(&masks.iter().collect::<Vec<_>>())?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Train, true);
        let out = net.forward(&ctx, ctx.input(x))?;
        let loss = bce_loss(out.prob, &y)?;
        let grads = tape.backward(loss)?;
        let value = loss.value().item() as f64 * batch.len() as f64;
        let pass = ctx.finish(Some(&grads));
        store.accumulate_grads(pass);
        Ok(value)
    };
    let validate = |store: &ParamStore<f32>| -> Result<Scores> {
        let (loss, metric) = segmentation_scores(&net, store, val, cfg.batch_size)?;
        Ok(Scores { loss, metric })
    };
    let outcome = run_loop(cfg, &mut store, train.len(), 1, step, validate)?;
    Ok(SegTraining {
        net,
        config: cfg.clone(),
        outcome,
    })
}

/// Mean cross-entropy and accuracy of a classifier on prepared inputs.
pub fn classification_scores(
    net: &Hybrid,
    store: &ParamStore<f32>,
    inputs: &[&Tensor<f32>],
    grades: &[usize],
    batch: usize,
) -> Result<(f64, f64)> {
    let probs = classify(net, store, inputs, batch)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, &g) in probs.iter().zip(grades) {
        loss -= p[g].max(crate::volcore::LOG_CLAMP).ln();
        correct += (argmax(p) == g) as usize;
    }
    let n = grades.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains a fresh hybrid classifier on images restricted by the frozen
/// `segmenter`, with early stopping on validation accuracy (ties broken by
/// validation loss). A trailing batch of one joins the previous batch,
/// since batch norm needs two samples.
pub fn train_classification(
    train: &[ClsExample],
    val: &[ClsExample],
    segmenter: &Segmenter,
    net_cfg: HybridConfig,
    cfg: &TrainRunConfig,
) -> Result<ClsTraining> {
    check_sets(train, val)?;
    if cfg.task != Task::Classification {
        return Err(Error::Config("train_classification needs task = classification".into()));
    }
    if train.len() < 2 {
        return Err(Error::Data("batch norm needs at least 2 training cases".into()));
    }
    let n_classes = net_cfg.n_classes;
    let mut store = ParamStore::new();
    let net = Hybrid::new(&mut store, net_cfg, &mut init_rng(cfg))?;
    let aug = cfg.augmentation();
    let prepare = |examples: &[&Volume]| -> Result<Vec<Tensor<f32>>> {
        Ok(segmenter
            .handoff(examples, cfg.batch_size)?
            .into_iter()
            .map(|h| h.input)
            .collect())
    };
    // Without augmentation the segmenter sees the same volumes every epoch.
    let cached: Option<Vec<Tensor<f32>>> = match aug {
        None => Some(prepare(&train.iter().map(|e| &e.image).collect::<Vec<_>>())?),
        Some(_) => None,
    };
    let val_inputs = prepare(&val.iter().map(|e| &e.image).collect::<Vec<_>>())?;
    let val_grades: Vec<usize> = val.iter().map(|e| e.grade).collect();

    let step = |store: &mut ParamStore<f32>, batch: &[usize], epoch: usize| -> Result<f64> {
        let inputs = match (&cached, aug) {
            (Some(c), _) => batch.iter().map(|&i| c[i].clone()).collect(),
            (None, Some(a)) => {
                let mut images = Vec::with_capacity(batch.len());
                for &i in batch {
                    let e = &train[i];
                    let blank = Volume::mask(Tensor::zeros(vec![1, e.image.shape()[1], e.image.shape()[2], e.image.shape()[3]]))?;
                    let (im, _) = augment(&e.image, &blank, a, &mut a.rng_for(i as u64, epoch as u64))?;
                    images.push(im);
                }
                prepare(&images.iter().collect::<Vec<_>>())?
            }
            (None, None) => unreachable!("inputs are cached when augmentation is off"),
        };
        let labels: Vec<usize> = batch.iter().map(|&i| train[i].grade).collect();
        let x = stack(&inputs.iter().collect::<Vec<_>>())?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Train, true);
        let out = net.forward(&ctx, ctx.input(x))?;
        let loss = softmax_cross_entropy(out.logits, &one_hot(&labels, n_classes)?)?;
        let grads = tape.backward(loss)?;
        let value = loss.value().item() as f64 * batch.len() as f64;
        let pass = ctx.finish(Some(&grads));
        store.accumulate_grads(pass);
        Ok(value)
    };
    let validate = |store: &ParamStore<f32>| -> Result<Scores> {
        let refs: Vec<_> = val_inputs.iter().collect();
        let (loss, metric) = classification_scores(&net, store, &refs, &val_grades, cfg.batch_size)?;
        Ok(Scores { loss, metric })
    };
    let outcome = run_loop(cfg, &mut store, train.len(), 2, step, validate)?;
    Ok(ClsTraining {
        net,
        config: cfg.clone(),
        threshold: segmenter.threshold,
        handoff: segmenter.mode,
        outcome,
    })
}
