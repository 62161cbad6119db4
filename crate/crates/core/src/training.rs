//! SGD training loops, the plateau learning-rate rule and evaluation passes.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainingState;
use crate::cls::{make_classifier_input, ClsModel, CLASS_NAMES};
use crate::data::{DatasetSplit, ImageSample};
use crate::error::{shape_err, Error, Result};
use crate::losses::{cce_from_logits, one_hot_masks, total_seg_loss};
use crate::metrics::{argmax_masks, argmax_rows, cls_metrics, ConfusionMatrix, MetricsReport, SegCounts, SegMetrics};
use crate::model::Network;
use crate::nn::{apply_bn_updates, Mode, ParamStore, Session};
use crate::seg::SegModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_improvement: f64,
    pub lr_min: f64,
    pub include_dice: bool,
    pub focal_gamma: f64,
    pub bn_momentum: f64,
    /// Round parameters to f32 after every step.
    pub f32_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 16,
            seed: 42,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_improvement: 1e-4,
            lr_min: 1e-6,
            include_dice: false,
            focal_gamma: 2.0,
            bn_momentum: 0.9,
            f32_params: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::InvalidGamma(self.focal_gamma));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1)");
        }
        if !(self.lr_min >= 0.0 && self.min_improvement >= 0.0) {
            return bad("lr_min and min_improvement must be nonnegative");
        }
        Ok(())
    }
}

/// `θ ← θ − lr·g` for every weight, then clears the gradients.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if let Some(i) = store.weights().find(|&i| store.tensor(i).grad().is_none()) {
        return Err(Error::MissingGradient(store.name(i).to_string()));
    }
    let weights: Vec<usize> = store.weights().collect();
    for i in weights {
        let t = store.tensor(i);
        let g = t.grad().expect("checked above");
        let next = t.values().iter().zip(g).map(|(v, g)| v - lr * g).collect();
        store.set_values(i, next)?;
        store.tensor_mut(i).clear_grad();
    }
    Ok(())
}

/// Learning rate after the epoch whose validation loss is the last entry of
/// `history`. The best loss and the count of epochs without an improvement
/// of at least `min_improvement` are replayed from the start; the rate drops
/// by `plateau_factor` when that count reaches `plateau_patience`, and the
/// count restarts. Never drops below `lr_min`.
pub fn plateau_lr(history: &[f64], lr: f64, cfg: &TrainConfig) -> f64 {
    let Some((&first, rest)) = history.split_first() else {
        return lr;
    };
    let mut best = first;
    let mut wait = 0;
    let mut reduce_now = false;
    for &v in rest {
        reduce_now = false;
        if v < best - cfg.min_improvement {
            best = v;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.plateau_patience {
                reduce_now = true;
                wait = 0;
            }
        }
    }
    if reduce_now && lr > cfg.lr_min {
        (lr * cfg.plateau_factor).max(cfg.lr_min)
    } else {
        lr
    }
}

fn check_dims(samples: &[&ImageSample], shape: [usize; 3]) -> Result<()> {
    let [_, h, w] = shape;
    match samples.iter().find(|s| (s.image.height, s.image.width) != (h, w)) {
        Some(s) => Err(shape_err(format!(
            "sample {} is {}x{}, model expects {h}x{w}",
            s.id, s.image.height, s.image.width
        ))),
        None => Ok(()),
    }
}

/// `[N, 1, H, W]` grayscale inputs and `[N, 2, H, W]` one-hot targets.
pub fn seg_batch(samples: &[&ImageSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| shape_err("empty batch"))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut x = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(shape_err("samples of different sizes in one batch"));
        }
        x.extend_from_slice(&s.image.to_gray().pixels);
    }
    let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::from_vec(&[samples.len(), 1, h, w], x)?, one_hot_masks(&masks)?))
}

/// `[N, 3, H, W]` masked inputs and class indices, using each sample's own mask.
pub fn cls_batch(samples: &[&ImageSample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| shape_err("empty batch"))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut x = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        let img = Tensor::from_vec(&[h, w], s.image.to_gray().pixels)?;
        let mask = Tensor::from_vec(&[h, w], s.mask.values.iter().map(|&m| f64::from(m)).collect())?;
        x.extend_from_slice(make_classifier_input(&img, &mask)?.values());
    }
    let labels = samples.iter().map(|s| s.label.index()).collect();
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], x)?, labels))
}

/// Seed of the dropout stream for one step.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ ((step as u64) << 8) ^ 0x5bd1_e995
}

/// Mini-batch order of one epoch: a fresh permutation from a counter-derived stream.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// One forward/backward/update on `net`. `loss` builds the scalar objective
/// from the network and input var, returning it plus whatever the caller
/// wants back from the tape.
pub fn train_step<N, T, F>(net: &mut N, x: &Tensor, cfg: &TrainConfig, lr: f64, dropout_seed: u64, loss: F) -> Result<T>
where
    N: Network,
    F: FnOnce(&N, &mut Session<'_>, &mut Tape, crate::tape::Var) -> Result<(crate::tape::Var, T)>,
{
    let (grads, updates, out) = {
        let mut tape = Tape::new();
        let mut s = Session::new(net.params(), Mode::Train).with_dropout_seed(dropout_seed);
        let xv = tape.constant(x.clone());
        let (l, out) = loss(net, &mut s, &mut tape, xv)?;
        tape.value(l).check_finite("training loss")?;
        let g = tape.backward(l)?;
        (s.weight_grads(&g), s.take_bn_updates(), out)
    };
    let store = net.params_mut();
    for (i, g) in grads {
        store.tensor_mut(i).accumulate_grad(&g)?;
    }
    sgd_step(store, lr)?;
    apply_bn_updates(store, &updates, cfg.bn_momentum)?;
    if cfg.f32_params {
        store.round_to_f32();
    }
    Ok(out)
}

/// Per-step losses of one segmentation update.
#[derive(Debug, Clone, Copy)]
pub struct SegStep {
    pub total: f64,
    pub focal: f64,
    pub jaccard: f64,
    pub dice: Option<f64>,
}

pub fn seg_train_step(model: &mut SegModel, batch: &[&ImageSample], cfg: &TrainConfig, lr: f64, seed: u64) -> Result<SegStep> {
    let (x, target) = seg_batch(batch)?;
    train_step(model, &x, cfg, lr, seed, |m, s, tape, xv| {
        let probs = m.forward(s, tape, xv)?;
        let l = total_seg_loss(tape, probs, &target, cfg.focal_gamma, cfg.include_dice)?;
        let (total, focal, jaccard, dice) = l.values(tape);
        Ok((
            l.total,
            SegStep {
                total,
                focal,
                jaccard,
                dice,
            },
        ))
    })
}

pub fn cls_train_step(model: &mut ClsModel, batch: &[&ImageSample], cfg: &TrainConfig, lr: f64, seed: u64) -> Result<f64> {
    let (x, labels) = cls_batch(batch)?;
    train_step(model, &x, cfg, lr, seed, |m, s, tape, xv| {
        let logits = m.logits(s, tape, xv)?;
        let l = cce_from_logits(tape, logits, &labels)?;
        let v = tape.value(l).values()[0];
        Ok((l, v))
    })
}

/// Eval-mode losses and pooled hard-mask metrics over `samples`.
pub fn evaluate_segmentation(model: &SegModel, samples: &[ImageSample], cfg: &TrainConfig) -> Result<MetricsReport> {
    let refs: Vec<&ImageSample> = samples.iter().collect();
    check_dims(&refs, model.input_shape())?;
    if refs.is_empty() {
        return Err(shape_err("no samples to evaluate"));
    }
    let mut counts = SegCounts::default();
    let (mut focal, mut jaccard, mut dice, mut total) = (0.0, 0.0, 0.0, 0.0);
    for chunk in refs.chunks(cfg.batch_size) {
        let (x, target) = seg_batch(chunk)?;
        let mut tape = Tape::new();
        let mut s = Session::new(model.params(), Mode::Eval);
        let xv = tape.constant(x);
        let probs = model.forward(&mut s, &mut tape, xv)?;
        let l = total_seg_loss(&mut tape, probs, &target, cfg.focal_gamma, cfg.include_dice)?;
        let (t, f, j, d) = l.values(&tape);
        let w = chunk.len() as f64;
        total += t * w;
        focal += f * w;
        jaccard += j * w;
        dice += d.unwrap_or(0.0) * w;
        for (pred, smp) in argmax_masks(tape.value(probs))?.iter().zip(chunk) {
            counts = counts.merge(SegCounts::from_masks(pred, &smp.mask)?);
        }
    }
    let n = refs.len() as f64;
    Ok(MetricsReport {
        loss_total: Some(total / n),
        loss_focal: Some(focal / n),
        loss_jaccard: Some(jaccard / n),
        loss_dice: cfg.include_dice.then_some(dice / n),
        ..MetricsReport::default()
    }
    .with_seg(SegMetrics::from(counts)))
}

/// Eval-mode cross-entropy and micro metrics over `samples` (own masks).
pub fn evaluate_classifier(model: &ClsModel, samples: &[ImageSample], cfg: &TrainConfig) -> Result<MetricsReport> {
    let refs: Vec<&ImageSample> = samples.iter().collect();
    check_dims(&refs, model.input_shape())?;
    if refs.is_empty() {
        return Err(shape_err("no samples to evaluate"));
    }
    let mut confusion = ConfusionMatrix::new(&CLASS_NAMES);
    let mut loss = 0.0;
    for chunk in refs.chunks(cfg.batch_size) {
        let (x, labels) = cls_batch(chunk)?;
        let mut tape = Tape::new();
        let mut s = Session::new(model.params(), Mode::Eval);
        let xv = tape.constant(x);
        let logits = model.logits(&mut s, &mut tape, xv)?;
        let l = cce_from_logits(&mut tape, logits, &labels)?;
        loss += tape.value(l).values()[0] * chunk.len() as f64;
        for (&actual, pred) in labels.iter().zip(argmax_rows(tape.value(logits))?) {
            confusion.record(actual, pred)?;
        }
    }
    let m = cls_metrics(&confusion)?;
    Ok(MetricsReport {
        loss_total: Some(loss / refs.len() as f64),
        ..MetricsReport::default()
    }
    .with_cls(m, &confusion))
}

/// Appends one JSON object per line.
pub fn append_jsonl(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", report.to_json())?;
    Ok(())
}

/// Called after every epoch with the epoch report, the model and the state
/// a checkpoint of that epoch should carry.
pub type EpochHook<'a, N> = dyn FnMut(&MetricsReport, &N, &TrainingState) -> Result<()> + 'a;

fn run_epochs<N: Network>(
    model: &mut N,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, N>,
    mut step: impl FnMut(&mut N, &[&ImageSample], f64, u64) -> Result<f64>,
    evaluate: impl Fn(&N, &[ImageSample]) -> Result<MetricsReport>,
) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(shape_err("training split is empty"));
    }
    let train: Vec<&ImageSample> = split.train.iter().collect();
    check_dims(&train, model.input_shape())?;
    let mut lr = cfg.learning_rate;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| train[i]).collect();
            loss_sum += step(model, &batch, lr, step_seed(cfg.seed, epoch, k))? * batch.len() as f64;
        }
        let mut report = if split.validation.is_empty() {
            MetricsReport::default()
        } else {
            evaluate(model, &split.validation)?
        };
        let train_loss = loss_sum / train.len() as f64;
        report.epoch = Some(epoch + 1);
        report.learning_rate = Some(lr);
        report.train_loss = Some(train_loss);
        history.push(report.loss_total.unwrap_or(train_loss));
        let state = TrainingState {
            epoch: epoch + 1,
            learning_rate: lr,
            seed: cfg.seed,
            val_history: history.clone(),
        };
        hook(&report, model, &state)?;
        reports.push(report);
        lr = plateau_lr(&history, lr, cfg);
    }
    Ok(reports)
}

/// Focal + Jaccard (+ Dice) objective, one report per epoch.
pub fn train_segmentation(model: &mut SegModel, split: &DatasetSplit, cfg: &TrainConfig, hook: &mut EpochHook<'_, SegModel>) -> Result<Vec<MetricsReport>> {
    run_epochs(
        model,
        split,
        cfg,
        hook,
        |m, batch, lr, seed| Ok(seg_train_step(m, batch, cfg, lr, seed)?.total),
        |m, val| evaluate_segmentation(m, val, cfg),
    )
}

/// Cross-entropy objective on masked inputs, one report per epoch.
pub fn train_classifier(model: &mut ClsModel, split: &DatasetSplit, cfg: &TrainConfig, hook: &mut EpochHook<'_, ClsModel>) -> Result<Vec<MetricsReport>> {
    run_epochs(
        model,
        split,
        cfg,
        hook,
        |m, batch, lr, seed| cls_train_step(m, batch, cfg, lr, seed),
        |m, val| evaluate_classifier(m, val, cfg),
    )
}

/// A hook that does nothing.
pub fn no_hook<N>() -> impl FnMut(&MetricsReport, &N, &TrainingState) -> Result<()> {
    |_, _, _| Ok(())
}
