//! Encoder, language-model and classifier forward passes.

use rand::RngCore;

use super::dropout::{self, embedding_dropout, variational_dropout, weight_drop_masks};
use super::lstm::step_from_projection;
use super::{Model, ModelKind};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::corpus::{ClfBatch, LmBatch, NUM_CLASSES, PAD_ID};
use crate::error::{Error, Result};

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Hidden and cell state of every layer, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(model: &Model<T>, batch: usize) -> Self {
        let dims: Vec<usize> = model.encoder.layers.iter().map(|l| l.hidden_size).collect();
        LstmState {
            h: dims.iter().map(|&d| Tensor::zeros(batch, d)).collect(),
            c: dims.iter().map(|&d| Tensor::zeros(batch, d)).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.h.first().map_or(0, |t| t.rows())
    }
}

pub struct LmOutput<T> {
    pub loss: Var,
    /// `(bptt * batch) x vocab`, time-major rows.
    pub logits: Var,
    pub state: LstmState<T>,
}

pub struct ClfOutput {
    pub loss: Var,
    /// `batch x 4`.
    pub logits: Var,
}

struct EncoderRun<T> {
    /// Top-layer output per time step, each `batch x out`.
    steps: Vec<Var>,
    /// The same outputs row-stacked, time-major.
    stacked: Var,
    state: LstmState<T>,
}

fn dropout_rows<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
            let mask = dropout::bernoulli_mask(r, c, p, rng);
            tape.apply_mask(x, mask, dropout::keep_scale(p))
        }
        _ => Ok(x),
    }
}

impl<T: Scalar> Model<T> {
    fn run_encoder(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        batch: usize,
        init: &LstmState<T>,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderRun<T>> {
        let cfg = &self.config;
        let d = cfg.dropouts;
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::InvalidArgument(format!("{} ids do not form {batch} rows", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::InvalidData(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let n_layers = self.encoder.layers.len();
        let state_ok = init.h.len() == n_layers
            && init.c.len() == n_layers
            && self.encoder.layers.iter().enumerate().all(|(l, layer)| {
                init.h[l].shape() == [batch, layer.hidden_size] && init.c[l].shape() == [batch, layer.hidden_size]
            });
        if !state_ok {
            let found = init.h.first().map(|t| t.shape().to_vec()).unwrap_or_default();
            return Err(Error::shape("lstm state", &found, &[batch, self.encoder.layers[0].hidden_size]));
        }
        let steps = ids.len() / batch;

        let mut emb = tape.param(&self.store, self.encoder.embedding);
        if let Mode::Train(rng) = mode {
            emb = embedding_dropout(tape, emb, d.emb, rng)?;
        }
        let mut x = tape.embedding(emb, ids)?;
        if let Mode::Train(rng) = mode {
            x = variational_dropout(tape, x, batch, d.input, rng)?;
        }

        let mut state = LstmState { h: Vec::new(), c: Vec::new() };
        let mut top_steps = Vec::new();
        for (l, layer) in self.encoder.layers.iter().enumerate() {
            let w_ih = tape.param(&self.store, layer.w_ih);
            let bias = tape.param(&self.store, layer.bias);
            let mut w_hh = tape.param(&self.store, layer.w_hh);
            if let Mode::Train(rng) = mode {
                if d.weight > 0.0 {
                    let shape = (layer.hidden_size, super::GATES * layer.hidden_size);
                    let mask = weight_drop_masks(&[shape], d.weight, rng)?.pop().expect("one mask");
                    w_hh = tape.apply_mask(w_hh, mask, dropout::keep_scale(d.weight))?;
                }
            }
            let xw = tape.matmul(x, w_ih)?;
            let xw = tape.add_row(xw, bias)?;
            let mut h = tape.constant(init.h[l].clone());
            let mut c = tape.constant(init.c[l].clone());
            let mut hs = Vec::with_capacity(steps);
            for t in 0..steps {
                let xw_t = tape.slice_rows(xw, t * batch, (t + 1) * batch)?;
                let (h2, c2) = step_from_projection(tape, xw_t, h, c, w_hh)?;
                h = h2;
                c = c2;
                hs.push(h);
            }
            state.h.push(tape.value(h).clone());
            state.c.push(tape.value(c).clone());
            let stacked = tape.concat_rows(&hs)?;
            if l + 1 < n_layers {
                x = match mode {
                    Mode::Train(rng) => variational_dropout(tape, stacked, batch, d.hidden, rng)?,
                    Mode::Eval => stacked,
                };
            } else {
                x = stacked;
                top_steps = hs;
            }
        }
        Ok(EncoderRun {
            steps: top_steps,
            stacked: x,
            state,
        })
    }

    fn activation_penalties(&self, tape: &mut Tape<T>, out: Var, batch: usize, loss: Var) -> Result<Var> {
        let mut loss = loss;
        if self.config.ar_alpha > 0.0 {
            let sq = tape.mul(out, out)?;
            let ar = tape.mean(sq);
            let ar = tape.scale(ar, T::lit(self.config.ar_alpha));
            loss = tape.add(loss, ar)?;
        }
        let rows = tape.value(out).rows();
        if self.config.tar_beta > 0.0 && rows > batch {
            let next = tape.slice_rows(out, batch, rows)?;
            let prev = tape.slice_rows(out, 0, rows - batch)?;
            let diff = tape.sub(next, prev)?;
            let sq = tape.mul(diff, diff)?;
            let tar = tape.mean(sq);
            let tar = tape.scale(tar, T::lit(self.config.tar_beta));
            loss = tape.add(loss, tar)?;
        }
        Ok(loss)
    }

    /// Next-token loss on one BPTT batch, starting from `state`. The returned
    /// state is detached and can be carried into the next batch of the same
    /// streams.
    pub fn lm_forward(&self, tape: &mut Tape<T>, batch: &LmBatch, state: &LstmState<T>, mut mode: Mode<'_>) -> Result<LmOutput<T>> {
        let decoder = match (&self.decoder, self.kind) {
            (Some(d), ModelKind::Lm) => d,
            _ => return Err(Error::InvalidArgument("lm_forward needs a language model".into())),
        };
        let (b, steps) = (batch.batch_size, batch.bptt);
        let mut ids = Vec::with_capacity(b * steps);
        let mut targets = Vec::with_capacity(b * steps);
        for t in 0..steps {
            for r in 0..b {
                ids.push(batch.input(r, t));
                targets.push(batch.target(r, t));
            }
        }
        let run = self.run_encoder(tape, &ids, b, state, &mut mode)?;
        let out = dropout_rows(tape, run.stacked, self.config.dropouts.hidden, &mut mode)?;
        let logits = match decoder.weight {
            Some(w) => {
                let w = tape.param(&self.store, w);
                tape.matmul(out, w)?
            }
            None => {
                let table = tape.param(&self.store, self.encoder.embedding);
                tape.matmul_nt(out, table)?
            }
        };
        let bias = tape.param(&self.store, decoder.bias);
        let logits = tape.add_row(logits, bias)?;
        let loss = tape.cross_entropy(logits, &targets, Some(PAD_ID))?;
        let loss = if mode.is_train() {
            self.activation_penalties(tape, run.stacked, b, loss)?
        } else {
            loss
        };
        Ok(LmOutput {
            loss,
            logits,
            state: run.state,
        })
    }

    /// Class logits and mean cross-entropy for a padded batch.
    pub fn clf_forward(&self, tape: &mut Tape<T>, batch: &ClfBatch, mut mode: Mode<'_>) -> Result<ClfOutput> {
        let head = match (&self.head, self.kind) {
            (Some(h), ModelKind::Clf) => h,
            _ => return Err(Error::InvalidArgument("clf_forward needs a classifier".into())),
        };
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty classifier batch".into()));
        }
        for r in 0..b {
            if batch.lengths[r] == 0 || (0..batch.width).all(|t| batch.id(r, t) == PAD_ID) {
                return Err(Error::InvalidData(format!("row {r} of the batch is all padding")));
            }
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::InvalidData(format!("class index {bad} out of range")));
        }
        let mut ids = Vec::with_capacity(b * batch.width);
        for t in 0..batch.width {
            for r in 0..b {
                ids.push(batch.id(r, t));
            }
        }
        let init = LstmState::zeros(self, b);
        let run = self.run_encoder(tape, &ids, b, &init, &mut mode)?;
        let last = tape.select_last(&run.steps, &batch.lengths)?;
        let max = tape.masked_max_over_time(&run.steps, &batch.lengths)?;
        let mean = tape.masked_mean_over_time(&run.steps, &batch.lengths)?;
        let pooled = tape.concat_cols(&[last, max, mean])?;
        let p = self.config.dropouts.head;
        let pooled = dropout_rows(tape, pooled, p, &mut mode)?;
        let w1 = tape.param(&self.store, head.fc1_w);
        let b1 = tape.param(&self.store, head.fc1_b);
        let w2 = tape.param(&self.store, head.fc2_w);
        let b2 = tape.param(&self.store, head.fc2_b);
        let z = tape.matmul(pooled, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.relu(z);
        let z = dropout_rows(tape, z, p, &mut mode)?;
        let z = tape.matmul(z, w2)?;
        let logits = tape.add_row(z, b2)?;
        let loss = tape.cross_entropy(logits, &batch.labels, None)?;
        Ok(ClfOutput { loss, logits })
    }

    /// Softmax class probabilities in evaluation mode, one row per example.
    pub fn predict_proba(&self, batch: &ClfBatch) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let mut tape = Tape::new();
        let out = self.clf_forward(&mut tape, batch, Mode::Eval)?;
        let lsm = tape.log_softmax(out.logits);
        let v = tape.value(lsm);
        Ok((0..v.rows())
            .map(|r| {
                let mut p = [0.0; NUM_CLASSES];
                for (k, x) in v.row(r).iter().enumerate() {
                    p[k] = x.as_f64().exp();
                }
                p
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, ModelKind};
    use super::*;
    use crate::corpus::{ClfExample, Truncate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(vocab: usize) -> ModelConfig {
        ModelConfig {
            emb_size: 6,
            hidden_size: 5,
            n_layers: 2,
            head_hidden: 4,
            ..ModelConfig::desk(vocab)
        }
    }

    fn clf(seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(config(12), ModelKind::Clf, [0; 32], &mut rng).unwrap()
    }

    fn batch_of(seqs: &[Vec<usize>], width_extra: usize) -> ClfBatch {
        let ex: Vec<ClfExample> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| ClfExample { ids: s.clone(), label: i % 4 })
            .collect();
        let refs: Vec<&ClfExample> = ex.iter().collect();
        let mut b = ClfBatch::from_examples(&refs, (0..ex.len()).collect(), 1000, Truncate::Head);
        if width_extra > 0 {
            let w = b.width + width_extra;
            let mut ids = Vec::new();
            for r in 0..b.len() {
                let mut row: Vec<usize> = (0..b.width).map(|t| b.id(r, t)).collect();
                row.resize(w, PAD_ID);
                ids.extend(row);
            }
            b.ids = ids;
            b.width = w;
        }
        b
    }

    #[test]
    fn padding_does_not_change_logits() {
        let m = clf(3);
        let seq = vec![2, 5, 7, 3, 9, 4];
        let short = batch_of(std::slice::from_ref(&seq), 0);
        let long = batch_of(&[seq], 6);
        let mut t1 = Tape::new();
        let a = m.clf_forward(&mut t1, &short, Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let b = m.clf_forward(&mut t2, &long, Mode::Eval).unwrap();
        for (x, y) in t1.value(a.logits).data().iter().zip(t2.value(b.logits).data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn eval_is_bit_deterministic() {
        let m = clf(4);
        let b = batch_of(&[vec![2, 3, 4], vec![2, 8, 8, 9, 10]], 0);
        let run = || {
            let mut t = Tape::new();
            let o = m.clf_forward(&mut t, &b, Mode::Eval).unwrap();
            t.value(o.logits).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_head_gives_ln4() {
        let mut m = clf(5);
        for id in m.head_param_ids() {
            m.store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = batch_of(&[vec![2, 3, 4], vec![2, 8, 9]], 0);
        let mut t = Tape::new();
        let o = m.clf_forward(&mut t, &b, Mode::Eval).unwrap();
        assert!((t.scalar(o.loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_pad_row_is_error() {
        let m = clf(6);
        let b = ClfBatch {
            ids: vec![0, 0, 2, 3],
            lengths: vec![2, 2],
            labels: vec![0, 1],
            width: 2,
            indices: vec![0, 1],
        };
        let mut t = Tape::new();
        assert!(m.clf_forward(&mut t, &b, Mode::Eval).is_err());
    }

    fn lm(seed: u64, vocab: usize) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(config(vocab), ModelKind::Lm, [0; 32], &mut rng).unwrap()
    }

    fn lm_batch(b: usize, bptt: usize, vocab: usize) -> LmBatch {
        let inputs: Vec<usize> = (0..b * bptt).map(|i| 3 + (i * 7) % (vocab - 3)).collect();
        let targets: Vec<usize> = (0..b * bptt).map(|i| 3 + (i * 5 + 1) % (vocab - 3)).collect();
        LmBatch {
            inputs,
            targets,
            batch_size: b,
            bptt,
        }
    }

    #[test]
    fn untrained_lm_loss_near_ln_vocab() {
        let m = lm(1, 40);
        let batch = lm_batch(3, 8, 40);
        let mut t = Tape::new();
        let o = m.lm_forward(&mut t, &batch, &LstmState::zeros(&m, 3), Mode::Eval).unwrap();
        let loss = t.scalar(o.loss);
        let ln = 40f64.ln();
        assert!((loss - ln).abs() <= 0.15 * ln, "{loss} vs {ln}");
    }

    #[test]
    fn state_carry_matches_one_long_pass() {
        let m = lm(2, 20);
        let full = lm_batch(2, 6, 20);
        let half = |range: std::ops::Range<usize>| {
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for r in 0..2 {
                for t in range.clone() {
                    inputs.push(full.input(r, t));
                    targets.push(full.target(r, t));
                }
            }
            LmBatch {
                inputs,
                targets,
                batch_size: 2,
                bptt: range.len(),
            }
        };
        let mut t = Tape::new();
        let whole = m.lm_forward(&mut t, &full, &LstmState::zeros(&m, 2), Mode::Eval).unwrap();
        let mut t1 = Tape::new();
        let a = m.lm_forward(&mut t1, &half(0..3), &LstmState::zeros(&m, 2), Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let b = m.lm_forward(&mut t2, &half(3..6), &a.state, Mode::Eval).unwrap();
        for (x, y) in whole.state.h.iter().zip(&b.state.h) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_shape_mismatch_is_error() {
        let m = lm(2, 20);
        let mut t = Tape::new();
        assert!(m.lm_forward(&mut t, &lm_batch(2, 3, 20), &LstmState::zeros(&m, 3), Mode::Eval).is_err());
    }

    #[test]
    fn tied_decoder_shares_embedding_storage() {
        let mut m = lm(3, 20);
        let batch = lm_batch(1, 2, 20);
        let logits = |m: &Model<f64>| {
            let mut t = Tape::new();
            let o = m.lm_forward(&mut t, &batch, &LstmState::zeros(m, 1), Mode::Eval).unwrap();
            t.value(o.logits).clone()
        };
        let before = logits(&m);
        // changing an embedding row for a token never fed as input changes
        // only that token's logit column
        let row = 19;
        assert!(!batch.inputs.contains(&row));
        let emb = m.encoder.embedding;
        for v in &mut m.store.get_mut(emb).tensor.data_mut()[row * 6..(row + 1) * 6] {
            *v += 0.5;
        }
        let after = logits(&m);
        for r in 0..before.rows() {
            for c in 0..20 {
                let changed = before.get(r, c) != after.get(r, c);
                assert_eq!(changed, c == row);
            }
        }
    }

    #[test]
    fn gate_ranges() {
        use crate::autodiff::Tensor;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::uniform(3, 4, 3.0, &mut rng));
        let h = t.constant(Tensor::uniform(3, 2, 1.0, &mut rng));
        let c = t.constant(Tensor::uniform(3, 2, 1.0, &mut rng));
        let w = t.constant(Tensor::uniform(4, 8, 2.0, &mut rng));
        let u = t.constant(Tensor::uniform(2, 8, 2.0, &mut rng));
        let b = t.constant(Tensor::uniform(1, 8, 1.0, &mut rng));
        let (h2, _) = super::super::lstm_cell_step(&mut t, x, h, c, w, u, b).unwrap();
        assert!(t.value(h2).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn training_mode_runs_with_all_dropouts() {
        let m = clf(7);
        let b = batch_of(&[vec![2, 3, 4, 5], vec![2, 8, 9]], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let o = m.clf_forward(&mut t, &b, Mode::Train(&mut rng)).unwrap();
        let g = t.backward(o.loss).unwrap();
        assert!(g.global_norm() > 0.0);
    }
}
