//! Language-model pretraining loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, non_finite, EpochRecord, LrProbe, OneCycleConfig, OneCycleSchedule, RunArtifacts, TrainState};
use crate::autodiff::{AdamConfig, Optimizer, OptimizerKind, ParamStore, Scalar, Tape};
use crate::corpus::{lm_batches, LmBatch};
use crate::error::{Error, Result};
use crate::model::{LstmState, Mode, Model, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
    pub schedule: OneCycleConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 25,
            batch_size: 8,
            bptt: 30,
            max_lr: 0.02,
            weight_decay: 0.01,
            grad_clip: 0.5,
            optimizer: OptimizerKind::Adam,
            schedule: OneCycleConfig::default(),
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bptt == 0 {
            return Err(Error::Config("lm batch_size and bptt must be positive".into()));
        }
        if !(self.max_lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(format!("bad lm learning-rate settings {self:?}")));
        }
        Ok(())
    }
}

/// Mean next-token loss over `seqs` in evaluation mode, carrying state
/// across batches. The batch size shrinks if the data are too short.
pub fn lm_eval_loss<T: Scalar>(model: &Model<T>, seqs: &[Vec<usize>], batch_size: usize, bptt: usize) -> Result<f64> {
    let total: usize = seqs.iter().map(Vec::len).sum();
    let bs = batch_size.min(total / (bptt + 1)).max(1);
    let stream = lm_batches(seqs, bs, bptt)?;
    let mut state = LstmState::zeros(model, bs);
    let (mut sum, mut n) = (0.0, 0usize);
    for batch in stream {
        let mut tape = Tape::new();
        let out = model.lm_forward(&mut tape, &batch, &state, Mode::Eval)?;
        sum += tape.scalar(out.loss).as_f64();
        n += 1;
        state = out.state;
    }
    Ok(sum / n as f64)
}

fn shuffled<'a>(seqs: &'a [Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<&'a Vec<usize>> = seqs.iter().collect();
    order.shuffle(rng);
    order.into_iter().cloned().collect()
}

/// Train a language model with a single one-cycle schedule over all steps.
/// On return `model` holds the weights with the lowest validation loss.
pub fn train_lm<T: Scalar>(
    model: &mut Model<T>,
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
    cfg: &LmTrainConfig,
    seed: u64,
    artifacts: &RunArtifacts,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if model.kind != ModelKind::Lm {
        return Err(Error::InvalidArgument("train_lm needs a language model".into()));
    }
    model.unfreeze_all();
    let mut state = TrainState::new(Optimizer::new(cfg.optimizer, AdamConfig::default(), cfg.weight_decay), seed);
    state.unfreeze_stage = model.max_unfreeze_stage();
    if cfg.epochs == 0 {
        artifacts.save_best(model, 0)?;
        return Ok(state);
    }
    let steps_per_epoch = lm_batches(train, cfg.batch_size, cfg.bptt)?.steps();
    let sched = OneCycleSchedule::new(cfg.max_lr, cfg.epochs * steps_per_epoch, cfg.schedule)?;
    let n_groups = model.config.num_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ParamStore<T>> = None;
    let mut valid_losses = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let stream = lm_batches(&shuffled(train, &mut rng), cfg.batch_size, cfg.bptt)?;
        let mut carry = LstmState::zeros(model, cfg.batch_size);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        for batch in stream {
            let mut tape = Tape::new();
            let out = model.lm_forward(&mut tape, &batch, &carry, Mode::Train(&mut rng))?;
            let loss = tape.scalar(out.loss).as_f64();
            if !loss.is_finite() {
                return Err(non_finite(model, &best, format!("training loss {loss} at epoch {epoch}, step {step}")));
            }
            let mut grads = tape.backward(out.loss)?;
            clip_gradients(&mut grads, cfg.grad_clip);
            let lr = sched.lr(step)?;
            let mom = if state.optimizer.uses_momentum() { Some(sched.momentum(step)?) } else { None };
            state.optimizer.step(&mut model.store, &grads, &vec![lr; n_groups], mom)?;
            carry = out.state;
            loss_sum += loss;
            n += 1;
            step += 1;
        }
        let eval_model;
        let scored: &Model<T> = match &state.optimizer {
            Optimizer::Asgd(a) if a.is_averaging() => {
                eval_model = Model {
                    store: a.averaged(&model.store).expect("averaging"),
                    ..model.clone()
                };
                &eval_model
            }
            _ => model,
        };
        let valid_loss = lm_eval_loss(scored, valid, cfg.batch_size, cfg.bptt)?;
        if !valid_loss.is_finite() {
            return Err(non_finite(model, &best, format!("validation loss {valid_loss} at epoch {epoch}")));
        }
        if let Optimizer::Asgd(a) = &mut state.optimizer {
            valid_losses.push(valid_loss);
            a.observe_validation(&model.store, &valid_losses);
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            valid_loss,
            valid_fbeta: None,
        };
        artifacts.append_history(&rec)?;
        state.history.push(rec);
        state.epoch = epoch;
        if state.best_metric.is_none_or(|b| valid_loss < b) {
            state.best_metric = Some(valid_loss);
            state.best_epoch = Some(epoch);
            best = Some(scored.store.clone());
            artifacts.save_best(scored, epoch)?;
        }
    }
    if let Some(b) = &best {
        model.store.copy_values_from(b);
    }
    Ok(state)
}

/// Range-test probe that trains a language model on cycling BPTT batches.
pub struct LmProbe<'a, T> {
    pub model: &'a mut Model<T>,
    batches: Vec<LmBatch>,
    next: usize,
    carry: LstmState<T>,
    optimizer: Optimizer<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> LmProbe<'a, T> {
    pub fn new(model: &'a mut Model<T>, train: &[Vec<usize>], cfg: &LmTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        model.unfreeze_all();
        let batches: Vec<LmBatch> = lm_batches(train, cfg.batch_size, cfg.bptt)?.collect();
        let carry = LstmState::zeros(model, cfg.batch_size);
        Ok(LmProbe {
            model,
            batches,
            next: 0,
            carry,
            optimizer: Optimizer::new(cfg.optimizer, AdamConfig::default(), cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl<T: Scalar> LrProbe for LmProbe<'_, T> {
    type Snapshot = (ParamStore<T>, Optimizer<T>, LstmState<T>, usize);

    fn snapshot(&self) -> Self::Snapshot {
        (self.model.store.clone(), self.optimizer.clone(), self.carry.clone(), self.next)
    }

    fn restore(&mut self, (store, opt, carry, next): Self::Snapshot) {
        self.model.store = store;
        self.optimizer = opt;
        self.carry = carry;
        self.next = next;
    }

    fn step(&mut self, lr: f64) -> Result<f64> {
        if self.next == self.batches.len() {
            self.next = 0;
            self.carry = LstmState::zeros(self.model, self.carry.batch_size());
        }
        let batch = &self.batches[self.next];
        self.next += 1;
        let mut tape = Tape::new();
        let out = self.model.lm_forward(&mut tape, batch, &self.carry, Mode::Train(&mut self.rng))?;
        let loss = tape.scalar(out.loss).as_f64();
        if !loss.is_finite() {
            return Ok(loss);
        }
        let grads = tape.backward(out.loss)?;
        if grads.global_norm().is_finite() {
            let n = self.model.config.num_groups();
            self.optimizer.step(&mut self.model.store, &grads, &vec![lr; n], None)?;
        }
        self.carry = out.state;
        Ok(loss)
    }
}
