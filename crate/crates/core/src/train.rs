//! Two-phase training and the direct-regression baseline.
//!
//! Phase 1 fits OR alone on clean images. Phase 2 freezes OR and trains IE
//! through OR's cross-entropy on color-jittered images; the jitter illuminant
//! never reaches the loss. The regression baseline fits IE directly to the
//! jitter with a cosine loss.
//!
//! Every run is a deterministic function of the dataset, the config and the
//! seed: the epoch order comes from stream `(seed, "shuffle-<phase>", epoch)`
//! and the jitter of image `i` in epoch `e` from
//! `(seed, "phase2-jitter", e·2³² + i)`, shared by Phase 2 and regression.
//! Trained parameters are rounded to `f32` so the returned network equals
//! the one stored in its checkpoint.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{GradBuffer, ParamSet, Sgd, SgdConfig, Tape, Var};
use crate::colorops::{angular_error, cast, Illuminant, Image};
use crate::dataio::{CheckpointMeta, Dataset};
use crate::error::{Error, Result};
use crate::models::{argmax, bind_constants, ie_forward, ieor_forward, image_input, or_forward, IENet, IEORPipeline, ORNet};
use crate::rng;
use crate::synthgen::{sample_illuminant, JitterConfig};

pub const JITTER_STREAM: &str = "phase2-jitter";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PretrainOr,
    IeEnd2end,
    IeRegression,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::PretrainOr => "pretrain-or",
            Phase::IeEnd2end => "ie-end2end",
            Phase::IeRegression => "ie-regression",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub jitter: JitterConfig,
    pub seed: u64,
    /// Angular-error diagnostics are logged every `eval_every` epochs.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn phase1(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            sgd: SgdConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 32,
            },
            jitter: JitterConfig::default(),
            seed,
            eval_every: 1,
        }
    }

    pub fn phase2(seed: u64) -> Self {
        TrainConfig {
            sgd: SgdConfig {
                learning_rate: 0.001,
                ..Self::phase1(seed).sgd
            },
            ..Self::phase1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.sgd.validate()?;
        self.jitter.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    /// Training top-1 accuracy seen during the epoch; `None` without OR.
    pub accuracy: Option<f64>,
    /// Mean angle between predicted and applied jitter; diagnostic only.
    pub mean_angular_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,phase,loss,accuracy,mean_angular_error,seconds";

    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.9}")).unwrap_or_default()
    }

    /// CSV with one row per epoch. Wall time is the only nondeterministic
    /// column; `with_seconds = false` leaves it empty.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let secs = if with_seconds { format!("{:.3}", r.seconds) } else { String::new() };
            s.push_str(&format!(
                "{},{},{:.9},{},{},{}\n",
                r.epoch,
                r.phase,
                r.loss,
                Self::opt(r.accuracy),
                Self::opt(r.mean_angular_error),
                secs
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv(true).as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Receives each epoch record as soon as it is complete.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochRecord);

/// The Phase-2 loss. Its inputs are the OR logits and the class labels only;
/// no illuminant can enter it.
pub fn end2end_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// `1 − cos(ρ_pred, ρ_target)`.
pub fn regression_loss(tape: &Tape, predicted: Var, target: Var) -> Result<Var> {
    let c = tape.cosine_similarity(predicted, target)?;
    tape.add_scalar(tape.scalar_mul(c, -1.0)?, 1.0)
}

/// The jitter applied to image `index` in `epoch` (0-based).
pub fn jitter_for(cfg: &TrainConfig, epoch: usize, index: usize) -> Illuminant {
    let mut r = rng::stream(cfg.seed, JITTER_STREAM, ((epoch as u64) << 32) | index as u64);
    sample_illuminant(&cfg.jitter, &mut r)
}

fn epoch_order(seed: u64, phase: Phase, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &format!("shuffle-{phase}"), epoch as u64);
    order.shuffle(&mut r);
    order
}

fn round_to_f32(params: &mut ParamSet) {
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn training_items(ds: &Dataset) -> Result<Vec<(&Image, usize)>> {
    if ds.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let labels = ds.labels()?;
    Ok(ds.items.iter().map(|it| &it.image).zip(labels).collect())
}

fn check_labels(items: &[(&Image, usize)], n_classes: usize) -> Result<()> {
    match items.iter().find(|(_, y)| *y >= n_classes) {
        Some((_, y)) => Err(Error::Dataset(format!("label {y} out of range for {n_classes} classes"))),
        None => Ok(()),
    }
}

/// One pass over the data in mini-batches. `step` runs the forward and
/// backward pass for one image and returns `(loss, correct, angle)`.
fn run_epoch(
    params: &mut ParamSet,
    sgd: &mut Sgd,
    order: &[usize],
    batch_size: usize,
    mut step: impl FnMut(&Tape, &[Var], usize) -> Result<(Var, Option<bool>, Option<f64>)>,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let mut grads = GradBuffer::new(params);
    let (mut loss_sum, mut correct, mut seen_acc, mut angle_sum, mut seen_angle) = (0.0, 0usize, 0usize, 0.0, 0usize);
    for batch in order.chunks(batch_size) {
        grads.clear();
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let (loss, hit, angle) = step(&tape, &bound, i)?;
            loss_sum += tape.item(loss)?;
            if let Some(h) = hit {
                seen_acc += 1;
                correct += h as usize;
            }
            if let Some(a) = angle {
                seen_angle += 1;
                angle_sum += a;
            }
            grads.accumulate(&tape.backward(loss)?, &bound, scale);
        }
        sgd.step(params, &grads)?;
    }
    let n = order.len() as f64;
    Ok((
        loss_sum / n,
        (seen_acc > 0).then(|| correct as f64 / seen_acc as f64),
        (seen_angle > 0).then(|| angle_sum / seen_angle as f64),
    ))
}

fn meta(phase: Phase, cfg: &TrainConfig) -> CheckpointMeta {
    CheckpointMeta {
        phase: phase.as_str().to_string(),
        epoch: cfg.epochs as u32,
        seed: cfg.seed,
    }
}

fn is_hit(tape: &Tape, logits: Var, label: usize) -> Result<bool> {
    Ok(argmax(tape.value(logits)?.data()) == label)
}

fn rho_of(tape: &Tape, rho: Var) -> Result<Illuminant> {
    let t = tape.value(rho)?;
    Illuminant::new(t.data()[0], t.data()[1], t.data()[2])
}

/// Phase 1: OR alone on clean images, softmax cross-entropy.
pub fn pretrain_or(
    or_net: ORNet,
    train_set: &Dataset,
    cfg: &TrainConfig,
    observer: Option<EpochObserver>,
) -> Result<(ORNet, CheckpointMeta, TrainLog)> {
    cfg.validate()?;
    let items = training_items(train_set)?;
    let mut or_net = or_net;
    check_labels(&items, or_net.n_classes())?;
    or_net.params.set_trainable(true);
    let mut sgd = Sgd::new(cfg.sgd, &or_net.params)?;
    let mut log = TrainLog::default();
    let mut observer = observer;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(cfg.seed, Phase::PretrainOr, epoch, items.len());
        let (loss, acc, _) = run_epoch(&mut or_net.params, &mut sgd, &order, cfg.sgd.batch_size, |tape, w, i| {
            let (img, label) = items[i];
            let logits = or_forward(tape, w, image_input(tape, img)?)?;
            let loss = tape.softmax_cross_entropy(logits, &[label])?;
            Ok((loss, Some(is_hit(tape, logits, label)?), None))
        })?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            phase: Phase::PretrainOr,
            loss,
            accuracy: acc,
            mean_angular_error: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec);
        }
        log.records.push(rec);
    }
    round_to_f32(&mut or_net.params);
    Ok((or_net, meta(Phase::PretrainOr, cfg), log))
}

/// Phase 2: IE trained through the frozen OR on jittered images.
///
/// The OR parameters are bound as tape constants, so they receive no
/// gradient and are never touched by the optimizer.
pub fn train_ie_end2end(
    pipeline: IEORPipeline,
    train_set: &Dataset,
    cfg: &TrainConfig,
    observer: Option<EpochObserver>,
) -> Result<(IEORPipeline, CheckpointMeta, TrainLog)> {
    if !pipeline.or_frozen || pipeline.or_net.params.iter().any(|p| p.trainable) {
        return Err(Error::Protocol("end-to-end training requires a frozen OR".into()));
    }
    cfg.validate()?;
    let items = training_items(train_set)?;
    check_labels(&items, pipeline.or_net.n_classes())?;
    let IEORPipeline { mut ie, or_net, .. } = pipeline;
    ie.params.set_trainable(true);
    let mut sgd = Sgd::new(cfg.sgd, &ie.params)?;
    let mut log = TrainLog::default();
    let mut observer = observer;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let diagnose = (epoch + 1) % cfg.eval_every == 0;
        let order = epoch_order(cfg.seed, Phase::IeEnd2end, epoch, items.len());
        let (loss, acc, angle) = run_epoch(&mut ie.params, &mut sgd, &order, cfg.sgd.batch_size, |tape, w, i| {
            let (img, label) = items[i];
            let rho_jit = jitter_for(cfg, epoch, i);
            let x = image_input(tape, &cast(img, &rho_jit).clipped())?;
            let or_w = bind_constants(tape, &or_net.params);
            let out = ieor_forward(tape, w, &or_w, x)?;
            let loss = end2end_loss(tape, out.logits, &[label])?;
            let angle = if diagnose { Some(angular_error(&rho_of(tape, out.rho)?, &rho_jit)) } else { None };
            Ok((loss, Some(is_hit(tape, out.logits, label)?), angle))
        })?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            phase: Phase::IeEnd2end,
            loss,
            accuracy: acc,
            mean_angular_error: angle,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec);
        }
        log.records.push(rec);
    }
    round_to_f32(&mut ie.params);
    Ok((IEORPipeline::new(ie, or_net), meta(Phase::IeEnd2end, cfg), log))
}

/// Direct regression of IE onto the applied jitter with a cosine loss.
pub fn train_ie_regression(
    ie: IENet,
    train_set: &Dataset,
    cfg: &TrainConfig,
    observer: Option<EpochObserver>,
) -> Result<(IENet, CheckpointMeta, TrainLog)> {
    cfg.validate()?;
    let items = training_items(train_set)?;
    let mut ie = ie;
    ie.params.set_trainable(true);
    let mut sgd = Sgd::new(cfg.sgd, &ie.params)?;
    let mut log = TrainLog::default();
    let mut observer = observer;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let diagnose = (epoch + 1) % cfg.eval_every == 0;
        let order = epoch_order(cfg.seed, Phase::IeRegression, epoch, items.len());
        let (loss, _, angle) = run_epoch(&mut ie.params, &mut sgd, &order, cfg.sgd.batch_size, |tape, w, i| {
            let (img, _) = items[i];
            let rho_jit = jitter_for(cfg, epoch, i);
            let x = image_input(tape, &cast(img, &rho_jit).clipped())?;
            let rho = ie_forward(tape, w, x)?;
            let target = tape.constant(crate::autodiff::Tensor::vector(rho_jit.rgb().to_vec()));
            let loss = regression_loss(tape, rho, target)?;
            let angle = if diagnose { Some(angular_error(&rho_of(tape, rho)?, &rho_jit)) } else { None };
            Ok((loss, None, angle))
        })?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            phase: Phase::IeRegression,
            loss,
            accuracy: None,
            mean_angular_error: angle,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec);
        }
        log.records.push(rec);
    }
    round_to_f32(&mut ie.params);
    Ok((ie, meta(Phase::IeRegression, cfg), log))
}
