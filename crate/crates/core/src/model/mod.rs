//! AWD-LSTM encoder with a tied language-model decoder and a pooled
//! classification head.

mod dropout;
mod forward;
mod lstm;

pub use dropout::{bernoulli_mask, embedding_dropout, variational_dropout, weight_drop_masks};
pub use forward::{ClfOutput, LmOutput, LstmState, Mode};
pub use lstm::{lstm_cell_step, GATES};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor};
use crate::corpus::{Vocab, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dropouts {
    /// Whole embedding rows.
    pub emb: f64,
    /// Variational dropout on the embedded inputs.
    pub input: f64,
    /// Variational dropout between LSTM layers.
    pub hidden: f64,
    /// DropConnect on recurrent weights.
    pub weight: f64,
    /// Classifier head.
    pub head: f64,
}

impl Default for Dropouts {
    fn default() -> Self {
        Dropouts {
            emb: 0.05,
            input: 0.3,
            hidden: 0.3,
            weight: 0.5,
            head: 0.1,
        }
    }
}

impl Dropouts {
    pub fn none() -> Self {
        Dropouts {
            emb: 0.0,
            input: 0.0,
            hidden: 0.0,
            weight: 0.0,
            head: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("emb", self.emb),
            ("input", self.input),
            ("hidden", self.hidden),
            ("weight", self.weight),
            ("head", self.head),
        ] {
            dropout::check_p(name, p)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub tie_weights: bool,
    pub head_hidden: usize,
    pub dropouts: Dropouts,
    /// Activation regularization weight (0 disables).
    #[serde(default)]
    pub ar_alpha: f64,
    /// Temporal activation regularization weight (0 disables).
    #[serde(default)]
    pub tar_beta: f64,
}

impl ModelConfig {
    /// Full-size defaults: 3 layers, 400-wide embeddings, 1150 hidden units.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            emb_size: 400,
            hidden_size: 1150,
            n_layers: 3,
            tie_weights: true,
            head_hidden: 50,
            dropouts: Dropouts::default(),
            ar_alpha: 0.0,
            tar_beta: 0.0,
        }
    }

    /// Small defaults for CPU-scale runs.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            emb_size: 64,
            hidden_size: 64,
            ..Self::full(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.emb_size == 0 || self.hidden_size == 0 || self.n_layers == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidArgument(format!("model dimensions must be positive: {self:?}")));
        }
        self.dropouts.validate()
    }

    /// `(input, hidden)` width of LSTM layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 { self.emb_size } else { self.hidden_size };
        let hidden = if l + 1 == self.n_layers && self.tie_weights {
            self.emb_size
        } else {
            self.hidden_size
        };
        (input, hidden)
    }

    pub fn output_size(&self) -> usize {
        self.layer_dims(self.n_layers - 1).1
    }

    /// Embedding plus one group per LSTM layer.
    pub fn encoder_groups(&self) -> usize {
        self.n_layers + 1
    }

    /// Encoder groups plus the decoder / head group.
    pub fn num_groups(&self) -> usize {
        self.n_layers + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lm,
    Clf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `input x 4*hidden`, gate blocks ordered input, forget, output, cell.
    pub w_ih: ParamId,
    /// `hidden x 4*hidden`, the weight-drop target.
    pub w_hh: ParamId,
    /// `1 x 4*hidden`.
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub embedding: ParamId,
    pub layers: Vec<LstmLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmDecoder {
    /// `None` when tied to the embedding matrix.
    pub weight: Option<ParamId>,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub kind: ModelKind,
    /// Content hash of the vocabulary the embedding rows index.
    pub vocab_hash: [u8; 32],
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Option<LmDecoder>,
    pub head: Option<ClassifierHead>,
}

/// Parameter names and shapes for a model kind, in store order.
pub fn param_layout(config: &ModelConfig, kind: ModelKind) -> Vec<(String, (usize, usize), usize)> {
    let mut out = vec![("encoder.embedding".to_string(), (config.vocab_size, config.emb_size), 0)];
    for l in 0..config.n_layers {
        let (i, h) = config.layer_dims(l);
        out.push((format!("encoder.lstm.{l}.w_ih"), (i, GATES * h), l + 1));
        out.push((format!("encoder.lstm.{l}.w_hh"), (h, GATES * h), l + 1));
        out.push((format!("encoder.lstm.{l}.bias"), (1, GATES * h), l + 1));
    }
    let top = config.n_layers + 1;
    let out_dim = config.output_size();
    match kind {
        ModelKind::Lm => {
            if !config.tie_weights {
                out.push(("decoder.weight".into(), (out_dim, config.vocab_size), top));
            }
            out.push(("decoder.bias".into(), (1, config.vocab_size), top));
        }
        ModelKind::Clf => {
            out.push(("head.fc1.weight".into(), (3 * out_dim, config.head_hidden), top));
            out.push(("head.fc1.bias".into(), (1, config.head_hidden), top));
            out.push(("head.fc2.weight".into(), (config.head_hidden, NUM_CLASSES), top));
            out.push(("head.fc2.bias".into(), (1, NUM_CLASSES), top));
        }
    }
    out
}

fn init_tensor<T: Scalar, R: Rng>(name: &str, (rows, cols): (usize, usize), config: &ModelConfig, rng: &mut R) -> Tensor<T> {
    if name == "encoder.embedding" {
        return Tensor::uniform(rows, cols, 0.1, rng);
    }
    if let Some(rest) = name.strip_prefix("encoder.lstm.") {
        let l: usize = rest.split('.').next().unwrap().parse().unwrap();
        let h = config.layer_dims(l).1;
        if name.ends_with(".bias") {
            // forget-gate block starts at +1
            let mut b = Tensor::zeros(1, GATES * h);
            for j in h..2 * h {
                b.data_mut()[j] = T::one();
            }
            return b;
        }
        return Tensor::uniform(rows, cols, 1.0 / (h as f64).sqrt(), rng);
    }
    if name.ends_with("bias") {
        return Tensor::zeros(rows, cols);
    }
    Tensor::uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

impl<T: Scalar> Model<T> {
    /// Fresh randomly initialized model.
    pub fn new<R: Rng>(config: ModelConfig, kind: ModelKind, vocab_hash: [u8; 32], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape, group) in param_layout(&config, kind) {
            let t = init_tensor(&name, shape, &config, rng);
            store.add(name, t, group)?;
        }
        Self::from_store(config, kind, vocab_hash, store)
    }

    pub fn new_lm<R: Rng>(config: ModelConfig, vocab: &Vocab, rng: &mut R) -> Result<Self> {
        Self::new(config, ModelKind::Lm, vocab.content_hash(), rng)
    }

    pub fn new_classifier<R: Rng>(config: ModelConfig, vocab: &Vocab, rng: &mut R) -> Result<Self> {
        Self::new(config, ModelKind::Clf, vocab.content_hash(), rng)
    }

    /// Bind a parameter store to the model structure, checking that every
    /// expected parameter is present with the right shape.
    pub fn from_store(config: ModelConfig, kind: ModelKind, vocab_hash: [u8; 32], store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config, kind);
        if layout.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for a {kind:?} model, found {}",
                layout.len(),
                store.len()
            )));
        }
        for (name, (r, c), _) in &layout {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.tensor(id).shape() != [*r, *c] {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected [{r}, {c}]",
                    store.tensor(id).shape()
                )));
            }
        }
        let id = |n: &str| store.find(n).unwrap();
        let layers = (0..config.n_layers)
            .map(|l| {
                let (input_size, hidden_size) = config.layer_dims(l);
                LstmLayer {
                    w_ih: id(&format!("encoder.lstm.{l}.w_ih")),
                    w_hh: id(&format!("encoder.lstm.{l}.w_hh")),
                    bias: id(&format!("encoder.lstm.{l}.bias")),
                    input_size,
                    hidden_size,
                }
            })
            .collect();
        let encoder = Encoder {
            embedding: id("encoder.embedding"),
            layers,
        };
        let (decoder, head) = match kind {
            ModelKind::Lm => (
                Some(LmDecoder {
                    weight: store.find("decoder.weight"),
                    bias: id("decoder.bias"),
                }),
                None,
            ),
            ModelKind::Clf => (
                None,
                Some(ClassifierHead {
                    fc1_w: id("head.fc1.weight"),
                    fc1_b: id("head.fc1.bias"),
                    fc2_w: id("head.fc2.weight"),
                    fc2_b: id("head.fc2.bias"),
                }),
            ),
        };
        let mut store = store;
        for (name, _, group) in &layout {
            let pid = store.find(name).unwrap();
            store.get_mut(pid).layer_group = *group;
        }
        Ok(Model {
            config,
            kind,
            vocab_hash,
            store,
            encoder,
            decoder,
            head,
        })
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.encoder.embedding];
        for l in &self.encoder.layers {
            ids.extend([l.w_ih, l.w_hh, l.bias]);
        }
        ids
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        match &self.head {
            Some(h) => vec![h.fc1_w, h.fc1_b, h.fc2_w, h.fc2_b],
            None => Vec::new(),
        }
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let found = vocab.content_hash();
        if found != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: hex::encode(self.vocab_hash),
                found: hex::encode(found),
            });
        }
        if vocab.len() != self.config.vocab_size {
            return Err(Error::InvalidData(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Number of trainable groups for [`Model::set_unfreeze_stage`]: stages
    /// run from 0 (head only) to `encoder_groups` (everything trainable).
    pub fn max_unfreeze_stage(&self) -> usize {
        self.config.encoder_groups()
    }

    /// Stage 0 trains only the decoder/head group; stage `k` additionally
    /// trains the `k` topmost encoder groups.
    pub fn set_unfreeze_stage(&mut self, stage: usize) -> Result<()> {
        let max = self.max_unfreeze_stage();
        if stage > max {
            return Err(Error::InvalidArgument(format!("unfreeze stage {stage} out of range 0..={max}")));
        }
        let first_trainable = max - stage;
        let top = self.config.num_groups() - 1;
        for p in self.store.iter_mut() {
            p.frozen = p.layer_group < first_trainable && p.layer_group != top;
        }
        Ok(())
    }

    pub fn freeze_encoder(&mut self) {
        self.set_unfreeze_stage(0).expect("stage 0 is always valid");
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.store.iter_mut() {
            p.frozen = false;
        }
    }

    /// Same architecture with different scalar precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            let id = store.add(p.name.clone(), p.tensor.cast(), p.layer_group).unwrap();
            store.get_mut(id).frozen = p.frozen;
        }
        Model {
            config: self.config,
            kind: self.kind,
            vocab_hash: self.vocab_hash,
            store,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }
}

/// Build a classifier whose encoder is a value copy of `lm`'s encoder, with
/// a fresh head and the encoder frozen.
pub fn transfer_encoder<T: Scalar, R: Rng>(lm: &Model<T>, vocab: &Vocab, head_hidden: usize, head_dropout: f64, rng: &mut R) -> Result<Model<T>> {
    if lm.kind != ModelKind::Lm {
        return Err(Error::InvalidArgument("transfer source must be a language model".into()));
    }
    lm.check_vocab(vocab)?;
    let mut config = lm.config;
    config.head_hidden = head_hidden;
    config.dropouts.head = head_dropout;
    let mut clf = Model::<T>::new(config, ModelKind::Clf, lm.vocab_hash, rng)?;
    for id in lm.encoder_param_ids() {
        let p = lm.store.get(id);
        let dst = clf.store.find(&p.name).expect("same encoder layout");
        clf.store.get_mut(dst).tensor = p.tensor.clone();
    }
    clf.freeze_encoder();
    Ok(clf)
}
