use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PAD_ID;
use crate::error::{Error, Result};

/// One truncated-BPTT step for every stream. Row-major `batch_size x bptt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub bptt: usize,
}

impl LmBatch {
    pub fn input(&self, row: usize, t: usize) -> usize {
        self.inputs[row * self.bptt + t]
    }

    pub fn target(&self, row: usize, t: usize) -> usize {
        self.targets[row * self.bptt + t]
    }
}

/// Sequences concatenated and cut into `batch_size` contiguous streams.
/// Consecutive batches continue each stream, so hidden state may be
/// carried between them.
#[derive(Debug, Clone)]
pub struct LmStream {
    streams: Vec<Vec<usize>>,
    bptt: usize,
    pos: usize,
}

impl LmStream {
    pub fn stream_len(&self) -> usize {
        self.streams[0].len()
    }

    /// Number of batches the stream yields in total.
    pub fn steps(&self) -> usize {
        (self.stream_len() - 1) / self.bptt
    }
}

impl Iterator for LmStream {
    type Item = LmBatch;

    fn next(&mut self) -> Option<LmBatch> {
        let t = self.pos;
        if t + self.bptt + 1 > self.stream_len() {
            return None;
        }
        self.pos += self.bptt;
        let mut inputs = Vec::with_capacity(self.streams.len() * self.bptt);
        let mut targets = Vec::with_capacity(inputs.capacity());
        for s in &self.streams {
            inputs.extend_from_slice(&s[t..t + self.bptt]);
            targets.extend_from_slice(&s[t + 1..t + self.bptt + 1]);
        }
        Some(LmBatch {
            inputs,
            targets,
            batch_size: self.streams.len(),
            bptt: self.bptt,
        })
    }
}

pub fn lm_batches(seqs: &[Vec<usize>], batch_size: usize, bptt: usize) -> Result<LmStream> {
    if batch_size == 0 || bptt == 0 {
        return Err(Error::InvalidArgument("batch_size and bptt must be positive".into()));
    }
    let total: usize = seqs.iter().map(Vec::len).sum();
    if total < batch_size * (bptt + 1) {
        return Err(Error::InvalidData(format!(
            "{total} tokens cannot fill {batch_size} streams of at least {} tokens",
            bptt + 1
        )));
    }
    let per_stream = total / batch_size;
    let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
    let streams = flat
        .chunks_exact(per_stream)
        .take(batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(LmStream { streams, bptt, pos: 0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncate {
    /// Keep the first `max_len` tokens.
    #[default]
    Head,
    /// Keep the last `max_len` tokens.
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClfExample {
    pub ids: Vec<usize>,
    /// Zero-based class index.
    pub label: usize,
}

/// Right-padded batch, row-major `len() x width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClfBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub width: usize,
    /// Position of each row in the example slice the batch came from.
    pub indices: Vec<usize>,
}

impl ClfBatch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn id(&self, row: usize, t: usize) -> usize {
        self.ids[row * self.width + t]
    }

    pub fn from_examples(examples: &[&ClfExample], indices: Vec<usize>, max_len: usize, truncate: Truncate) -> Self {
        let clipped: Vec<&[usize]> = examples
            .iter()
            .map(|e| {
                let n = e.ids.len();
                if n <= max_len {
                    &e.ids[..]
                } else {
                    match truncate {
                        Truncate::Head => &e.ids[..max_len],
                        Truncate::Tail => &e.ids[n - max_len..],
                    }
                }
            })
            .collect();
        let width = clipped.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD_ID; examples.len() * width];
        for (row, s) in clipped.iter().enumerate() {
            ids[row * width..row * width + s.len()].copy_from_slice(s);
        }
        ClfBatch {
            ids,
            lengths: clipped.iter().map(|s| s.len()).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            width,
            indices,
        }
    }
}

/// Length-bucketed classifier batches.
///
/// Without an rng, examples are sorted by length (longest first) and cut in
/// order. With an rng, examples are shuffled, sorted within chunks of
/// `50 * batch_size`, and the resulting batches are shuffled.
pub fn clf_batches<R: Rng>(
    examples: &[ClfExample],
    batch_size: usize,
    max_len: usize,
    truncate: Truncate,
    rng: Option<&mut R>,
) -> Vec<ClfBatch> {
    assert!(batch_size > 0 && max_len > 0, "batch_size and max_len must be positive");
    let key = |i: &usize| std::cmp::Reverse(examples[*i].ids.len().min(max_len));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut groups: Vec<Vec<usize>> = match rng {
        None => {
            order.sort_by_key(key);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        Some(rng) => {
            order.shuffle(rng);
            for chunk in order.chunks_mut(batch_size * 50) {
                chunk.sort_by_key(key);
            }
            let mut g: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
            g.shuffle(rng);
            g
        }
    };
    groups
        .drain(..)
        .map(|idx| {
            let ex: Vec<&ClfExample> = idx.iter().map(|&i| &examples[i]).collect();
            ClfBatch::from_examples(&ex, idx, max_len, truncate)
        })
        .collect()
}
