//! End-to-end steps shared by the command-line tool and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CorpusConfig, RunConfig};
use crate::corpus::{build_vocab, dedup_normals, encode_clf, encode_lm, stratified_split, ClfExample, IngestReport, SplitDataset, Vocab};
use crate::error::Result;
use crate::model::{transfer_encoder, Model};
use crate::trainer::{train_clf, train_lm, RunArtifacts, TrainState};

/// Deduplicated, split corpus with its training-split vocabulary.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitDataset,
    pub vocab: Vocab,
    pub removed_duplicates: usize,
    pub skipped_composite: usize,
}

/// Dedup normals, split per class, and build the vocabulary from the
/// training split only.
pub fn prepare(report: IngestReport, corpus: &CorpusConfig, seed: u64) -> Result<Prepared> {
    let before = report.records.len();
    let records = dedup_normals(report.records);
    let removed_duplicates = before - records.len();
    let split = stratified_split(&records, corpus.ratios, seed)?;
    let vocab = build_vocab(&split.train, corpus.min_freq)?;
    Ok(Prepared {
        split,
        vocab,
        removed_duplicates,
        skipped_composite: report.skipped_composite,
    })
}

impl Prepared {
    pub fn lm_train(&self) -> Vec<Vec<usize>> {
        encode_lm(&self.split.train, &self.vocab)
    }

    pub fn lm_valid(&self) -> Vec<Vec<usize>> {
        encode_lm(&self.split.valid, &self.vocab)
    }

    pub fn clf_train(&self) -> Vec<ClfExample> {
        encode_clf(&self.split.train, &self.vocab)
    }

    pub fn clf_valid(&self) -> Vec<ClfExample> {
        encode_clf(&self.split.valid, &self.vocab)
    }

    pub fn clf_test(&self) -> Vec<ClfExample> {
        encode_clf(&self.split.test, &self.vocab)
    }
}

/// Seeds for the independent random streams of one run.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

/// Fresh language model trained on the training split.
pub fn pretrain_lm(prepared: &Prepared, cfg: &RunConfig, artifacts: &RunArtifacts) -> Result<(Model<f32>, TrainState<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let mut lm = Model::new_lm(cfg.model.with_vocab(prepared.vocab.len()), &prepared.vocab, &mut rng)?;
    let state = train_lm(&mut lm, &prepared.lm_train(), &prepared.lm_valid(), &cfg.lm, stream_seed(cfg.seed, 2), artifacts)?;
    Ok((lm, state))
}

/// Classifier fine-tuned from `lm`'s encoder, or from a random encoder
/// when `lm` is `None`.
pub fn finetune(prepared: &Prepared, lm: Option<&Model<f32>>, cfg: &RunConfig, artifacts: &RunArtifacts) -> Result<(Model<f32>, TrainState<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 3));
    let mut clf = match lm {
        Some(lm) => transfer_encoder(lm, &prepared.vocab, cfg.model.head_hidden, cfg.model.dropouts.head, &mut rng)?,
        None => {
            let mut m = Model::new_classifier(cfg.model.with_vocab(prepared.vocab.len()), &prepared.vocab, &mut rng)?;
            m.freeze_encoder();
            m
        }
    };
    let state = train_clf(&mut clf, &prepared.clf_train(), &prepared.clf_valid(), &cfg.clf, stream_seed(cfg.seed, 4), artifacts)?;
    Ok((clf, state))
}
