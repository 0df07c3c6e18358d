//! Files written by `prep` and read back by the training commands.

use std::path::{Path, PathBuf};

use opsc_core::corpus::{class_counts, ingest, write_corpus, SplitManifest, Vocab, NUM_CLASSES};
use opsc_core::pipeline::Prepared;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const SUMMARY_FILE: &str = "prep.json";

/// Counts recorded alongside a prepared corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub records: usize,
    pub removed_duplicates: usize,
    pub skipped_composite: usize,
    pub vocab_size: usize,
    pub vocab_hash: String,
    /// Per-class counts, Type-1..Type-4.
    pub train: [usize; NUM_CLASSES],
    pub valid: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
}

impl PrepSummary {
    pub fn of(prepared: &Prepared) -> Self {
        let s = &prepared.split;
        PrepSummary {
            records: s.train.len() + s.valid.len() + s.test.len(),
            removed_duplicates: prepared.removed_duplicates,
            skipped_composite: prepared.skipped_composite,
            vocab_size: prepared.vocab.len(),
            vocab_hash: prepared.vocab.content_hash_hex(),
            train: class_counts(&s.train),
            valid: class_counts(&s.valid),
            test: class_counts(&s.test),
        }
    }
}

pub fn save(prepared: &Prepared, dir: &Path) -> CliResult<PrepSummary> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    prepared.vocab.save(&dir.join(VOCAB_FILE))?;
    let s = &prepared.split;
    let all: Vec<_> = s.train.iter().chain(&s.valid).chain(&s.test).cloned().collect();
    write_corpus(&dir.join(CORPUS_FILE), &all)?;
    SplitManifest::from_split(s).save(&dir.join(SPLIT_FILE))?;
    let summary = PrepSummary::of(prepared);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn load(dir: &Path) -> CliResult<Prepared> {
    let need = |name: &str| -> CliResult<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::BadInput {
                path: p,
                reason: "missing; is this a directory written by `opsc prep`?".into(),
            })
        }
    };
    let vocab = Vocab::load(&need(VOCAB_FILE)?)?;
    let report = ingest(&need(CORPUS_FILE)?)?;
    let split = SplitManifest::load(&need(SPLIT_FILE)?)?.apply(&report.records)?;
    Ok(Prepared {
        split,
        vocab,
        removed_duplicates: 0,
        skipped_composite: report.skipped_composite,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
