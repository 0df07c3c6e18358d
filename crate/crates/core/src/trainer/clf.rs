//! Classifier fine-tuning with discriminative rates and gradual unfreezing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, discriminative_lrs, non_finite, EpochRecord, LrProbe, OneCycleConfig, OneCycleSchedule, RunArtifacts, TrainState};
use crate::autodiff::{AdamConfig, Optimizer, OptimizerKind, ParamStore, Scalar, Tape};
use crate::corpus::{clf_batches, ClfBatch, ClfExample, Truncate, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{confusion, report, MetricsReport};
use crate::model::{Mode, Model, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub truncate: Truncate,
    /// Peak rate of the embedding group.
    pub lr_lo: f64,
    /// Peak rate of the head group.
    pub lr_hi: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
    pub schedule: OneCycleConfig,
    /// Epochs spent at each unfreeze stage before the next encoder group
    /// is released.
    pub epochs_per_stage: usize,
    /// F-score beta used for model selection.
    pub beta: f64,
    /// Stop as soon as the weighted validation F reaches this value.
    pub stop_at_fbeta: Option<f64>,
    /// Stop after this many epochs; the schedule still spans `epochs`.
    pub halt_after: Option<usize>,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        ClfTrainConfig {
            epochs: 20,
            batch_size: 16,
            max_len: 400,
            truncate: Truncate::Head,
            lr_lo: 0.001,
            lr_hi: 0.01,
            weight_decay: 0.01,
            grad_clip: 0.5,
            optimizer: OptimizerKind::Adam,
            schedule: OneCycleConfig::default(),
            epochs_per_stage: 1,
            beta: 1.0,
            stop_at_fbeta: None,
            halt_after: None,
        }
    }
}

impl ClfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 || self.epochs_per_stage == 0 {
            return Err(Error::Config("clf batch_size, max_len and epochs_per_stage must be positive".into()));
        }
        if !(self.beta > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(format!("bad classifier settings {self:?}")));
        }
        discriminative_lrs(1, self.lr_lo, self.lr_hi).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Unfreeze stage for a 1-based epoch.
    pub fn stage_for_epoch(&self, epoch: usize, max_stage: usize) -> usize {
        ((epoch - 1) / self.epochs_per_stage).min(max_stage)
    }
}

/// Softmax probabilities for every example, in input order.
pub fn predict_clf<T: Scalar>(model: &Model<T>, examples: &[ClfExample], batch_size: usize, max_len: usize, truncate: Truncate) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mut out = vec![[0.0; NUM_CLASSES]; examples.len()];
    for batch in clf_batches::<ChaCha8Rng>(examples, batch_size, max_len, truncate, None) {
        let probs = model.predict_proba(&batch)?;
        for (&i, p) in batch.indices.iter().zip(probs) {
            out[i] = p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Mean cross-entropy.
    pub loss: f64,
    pub probs: Vec<[f64; NUM_CLASSES]>,
    /// 1-based predicted labels.
    pub predicted: Vec<usize>,
}

pub fn argmax(p: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

/// Predict and score `examples`.
pub fn evaluate_clf<T: Scalar>(model: &Model<T>, examples: &[ClfExample], batch_size: usize, max_len: usize, truncate: Truncate, beta: f64) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::InvalidData("nothing to evaluate".into()));
    }
    let probs = predict_clf(model, examples, batch_size, max_len, truncate)?;
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p) + 1).collect();
    let actual: Vec<usize> = examples.iter().map(|e| e.label + 1).collect();
    let loss = examples
        .iter()
        .zip(&probs)
        .map(|(e, p)| -p[e.label].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / examples.len() as f64;
    let cm = confusion(&predicted, &actual)?;
    let report = report(&cm, Some((&probs, &actual)), beta)?;
    Ok(Evaluation {
        report,
        loss,
        probs,
        predicted,
    })
}

/// Fine-tune a classifier. The encoder starts frozen and one more encoder
/// group is released every `epochs_per_stage` epochs. On return `model`
/// holds the weights with the best weighted validation F.
pub fn train_clf<T: Scalar>(
    model: &mut Model<T>,
    train: &[ClfExample],
    valid: &[ClfExample],
    cfg: &ClfTrainConfig,
    seed: u64,
    artifacts: &RunArtifacts,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if model.kind != ModelKind::Clf {
        return Err(Error::InvalidArgument("train_clf needs a classifier".into()));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InvalidData("classifier training needs non-empty train and valid splits".into()));
    }
    let mut state = TrainState::new(Optimizer::new(cfg.optimizer, AdamConfig::default(), cfg.weight_decay), seed);
    if cfg.epochs == 0 {
        artifacts.save_best(model, 0)?;
        artifacts.write_fbeta_csv(&state.history)?;
        return Ok(state);
    }
    let peaks = discriminative_lrs(model.config.num_groups(), cfg.lr_lo, cfg.lr_hi)?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let sched = OneCycleSchedule::new(cfg.lr_hi, cfg.epochs * steps_per_epoch, cfg.schedule)?;
    let max_stage = model.max_unfreeze_stage();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ParamStore<T>> = None;
    let mut best_loss = f64::INFINITY;
    let mut step = 0;
    let last_epoch = cfg.halt_after.map_or(cfg.epochs, |h| h.min(cfg.epochs));
    for epoch in 1..=last_epoch {
        state.unfreeze_stage = cfg.stage_for_epoch(epoch, max_stage);
        model.set_unfreeze_stage(state.unfreeze_stage)?;
        let batches = clf_batches(train, cfg.batch_size, cfg.max_len, cfg.truncate, Some(&mut rng));
        let (mut loss_sum, mut n) = (0.0, 0usize);
        for batch in &batches {
            let mut tape = Tape::new();
            let out = model.clf_forward(&mut tape, batch, Mode::Train(&mut rng))?;
            let loss = tape.scalar(out.loss).as_f64();
            if !loss.is_finite() {
                return Err(non_finite(model, &best, format!("training loss {loss} at epoch {epoch}, step {step}")));
            }
            let mut grads = tape.backward(out.loss)?;
            clip_gradients(&mut grads, cfg.grad_clip);
            let scale = sched.lr(step)? / cfg.lr_hi;
            let lrs: Vec<f64> = peaks.iter().map(|p| p * scale).collect();
            let mom = if state.optimizer.uses_momentum() { Some(sched.momentum(step)?) } else { None };
            state.optimizer.step(&mut model.store, &grads, &lrs, mom)?;
            loss_sum += loss * batch.len() as f64;
            n += batch.len();
            step += 1;
        }
        let eval = evaluate_clf(model, valid, cfg.batch_size, cfg.max_len, cfg.truncate, cfg.beta)?;
        if !eval.loss.is_finite() {
            return Err(non_finite(model, &best, format!("validation loss {} at epoch {epoch}", eval.loss)));
        }
        let fbeta = eval.report.weighted.fbeta;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            valid_loss: eval.loss,
            valid_fbeta: Some(fbeta),
        };
        artifacts.append_history(&rec)?;
        state.history.push(rec);
        state.epoch = epoch;
        // Ties on F (common with small validation splits) go to the lower
        // validation loss.
        let better = match state.best_metric {
            None => true,
            Some(b) => fbeta > b || (fbeta == b && eval.loss < best_loss),
        };
        if better {
            best_loss = eval.loss;
            state.best_metric = Some(fbeta);
            state.best_epoch = Some(epoch);
            best = Some(model.store.clone());
            artifacts.save_best(model, epoch)?;
        }
        if cfg.stop_at_fbeta.is_some_and(|t| fbeta >= t) {
            break;
        }
    }
    artifacts.write_fbeta_csv(&state.history)?;
    if let Some(b) = &best {
        model.store.copy_values_from(b);
    }
    Ok(state)
}

/// Range-test probe over shuffled classifier batches at the model's current
/// freeze state, with discriminative ratios applied to the probed rate.
pub struct ClfProbe<'a, T> {
    pub model: &'a mut Model<T>,
    batches: Vec<ClfBatch>,
    next: usize,
    ratios: Vec<f64>,
    optimizer: Optimizer<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> ClfProbe<'a, T> {
    pub fn new(model: &'a mut Model<T>, train: &[ClfExample], cfg: &ClfTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = clf_batches(train, cfg.batch_size, cfg.max_len, cfg.truncate, Some(&mut rng));
        if batches.is_empty() {
            return Err(Error::InvalidData("no training examples".into()));
        }
        let ratios = discriminative_lrs(model.config.num_groups(), cfg.lr_lo, cfg.lr_hi)?
            .into_iter()
            .map(|l| l / cfg.lr_hi)
            .collect();
        Ok(ClfProbe {
            model,
            batches,
            next: 0,
            ratios,
            optimizer: Optimizer::new(cfg.optimizer, AdamConfig::default(), cfg.weight_decay),
            rng,
        })
    }
}

impl<T: Scalar> LrProbe for ClfProbe<'_, T> {
    type Snapshot = (ParamStore<T>, Optimizer<T>, usize);

    fn snapshot(&self) -> Self::Snapshot {
        (self.model.store.clone(), self.optimizer.clone(), self.next)
    }

    fn restore(&mut self, (store, opt, next): Self::Snapshot) {
        self.model.store = store;
        self.optimizer = opt;
        self.next = next;
    }

    fn step(&mut self, lr: f64) -> Result<f64> {
        let batch = &self.batches[self.next % self.batches.len()];
        self.next += 1;
        let mut tape = Tape::new();
        let out = self.model.clf_forward(&mut tape, batch, Mode::Train(&mut self.rng))?;
        let loss = tape.scalar(out.loss).as_f64();
        if !loss.is_finite() {
            return Ok(loss);
        }
        let grads = tape.backward(out.loss)?;
        if grads.global_norm().is_finite() {
            let lrs: Vec<f64> = self.ratios.iter().map(|r| r * lr).collect();
            self.optimizer.step(&mut self.model.store, &grads, &lrs, None)?;
        }
        Ok(loss)
    }
}
