//! Labelled contract corpora: ingestion, normal-class deduplication,
//! stratified splitting, vocabulary and batching.

mod batch;
mod split;
mod vocab;

pub use batch::{clf_batches, lm_batches, ClfBatch, ClfExample, LmBatch, LmStream, Truncate};
pub use split::{split_sizes, stratified_split, SplitDataset, SplitManifest, DEFAULT_RATIOS};
pub use vocab::{build_vocab, numericalize, Vocab, BOS_ID, PAD_ID, UNK_ID};

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::disasm::{disassemble_with, load_opcode_table, DisasmOptions};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

/// Vulnerability category. The composite Prodigal+Greedy category (label 5)
/// is not representable and is dropped at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum LabelType {
    Suicidal,
    Prodigal,
    Greedy,
    Normal,
}

impl LabelType {
    pub const ALL: [LabelType; NUM_CLASSES] = [
        LabelType::Suicidal,
        LabelType::Prodigal,
        LabelType::Greedy,
        LabelType::Normal,
    ];

    /// Zero-based class index used by the model.
    pub fn index(self) -> usize {
        self as usize
    }

    /// One-based type number as used in corpus files (Type-1..Type-4).
    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_number(n: u8) -> Option<Self> {
        (n as usize).checked_sub(1).and_then(Self::from_index)
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelType::Suicidal => "Suicidal",
            LabelType::Prodigal => "Prodigal",
            LabelType::Greedy => "Greedy",
            LabelType::Normal => "Normal",
        }
    }

    pub fn is_vulnerable(self) -> bool {
        self != LabelType::Normal
    }
}

impl fmt::Display for LabelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Type-{} ({})", self.number(), self.name())
    }
}

impl TryFrom<u8> for LabelType {
    type Error = String;
    fn try_from(n: u8) -> std::result::Result<Self, String> {
        Self::from_number(n).ok_or_else(|| format!("label {n} is not in 1..=4"))
    }
}

impl From<LabelType> for u8 {
    fn from(l: LabelType) -> u8 {
        l.number()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractRecord {
    pub address: String,
    pub tokens: Vec<String>,
    pub label: LabelType,
}

/// One line of a corpus file. Exactly one of `bytecode` / `tokens` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub address: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytecode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    pub label: u8,
}

/// Label value for the composite category that ingestion skips.
pub const COMPOSITE_LABEL: u8 = 5;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<ContractRecord>,
    /// Records kept per class, in Type-1..Type-4 order.
    pub counts: [usize; NUM_CLASSES],
    pub skipped_composite: usize,
}

pub fn ingest(path: &Path) -> Result<IngestReport> {
    ingest_with(path, DisasmOptions::default())
}

pub fn ingest_with(path: &Path, opts: DisasmOptions) -> Result<IngestReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), &path.display().to_string(), opts)
}

/// Parse line-delimited JSON records. `source` only labels error messages.
pub fn ingest_reader<R: BufRead>(reader: R, source: &str, opts: DisasmOptions) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let table = load_opcode_table();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let bad = |reason: String| Error::MalformedRecord {
            path: source.to_string(),
            line: lineno,
            reason,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if raw.label == COMPOSITE_LABEL {
            report.skipped_composite += 1;
            continue;
        }
        let label = LabelType::try_from(raw.label).map_err(bad)?;
        let tokens = match (raw.bytecode, raw.tokens) {
            (Some(hex), None) => disassemble_with(&hex, table, opts)
                .map_err(|e| bad(e.to_string()))?
                .tokens,
            (None, Some(tokens)) => tokens,
            _ => return Err(bad("exactly one of \"bytecode\" or \"tokens\" is required".into())),
        };
        if tokens.is_empty() {
            return Err(bad("record has no opcodes".into()));
        }
        if !seen.insert(raw.address.clone()) {
            return Err(bad(format!("duplicate address {}", raw.address)));
        }
        report.counts[label.index()] += 1;
        report.records.push(ContractRecord {
            address: raw.address,
            tokens,
            label,
        });
    }
    Ok(report)
}

/// Write records in token form, one JSON object per line.
pub fn write_corpus(path: &Path, records: &[ContractRecord]) -> Result<()> {
    let raws: Vec<RawRecord> = records
        .iter()
        .map(|r| RawRecord {
            address: r.address.clone(),
            bytecode: None,
            tokens: Some(r.tokens.clone()),
            label: r.label.number(),
        })
        .collect();
    write_raw_corpus(path, &raws)
}

pub fn write_raw_corpus(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Language-model id sequences, one per record.
pub fn encode_lm(records: &[ContractRecord], vocab: &Vocab) -> Vec<Vec<usize>> {
    records.iter().map(|r| numericalize(&r.tokens, vocab)).collect()
}

/// Classifier examples with 0-based class indices.
pub fn encode_clf(records: &[ContractRecord], vocab: &Vocab) -> Vec<ClfExample> {
    records
        .iter()
        .map(|r| ClfExample {
            ids: numericalize(&r.tokens, vocab),
            label: r.label.index(),
        })
        .collect()
}

/// Keep every vulnerable record; keep only the first Normal record for each
/// distinct token sequence. Order is otherwise preserved.
pub fn dedup_normals(records: Vec<ContractRecord>) -> Vec<ContractRecord> {
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    records
        .into_iter()
        .filter(|r| r.label.is_vulnerable() || seen.insert(r.tokens.clone()))
        .collect()
}

pub fn class_counts(records: &[ContractRecord]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for r in records {
        counts[r.label.index()] += 1;
    }
    counts
}
