use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContractRecord, LabelType, NUM_CLASSES};
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<ContractRecord>,
    pub valid: Vec<ContractRecord>,
    pub test: Vec<ContractRecord>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Per-class `(train, valid, test)` sizes.
///
/// Valid and test take `floor(ratio * n)` each (at least one record), train
/// takes the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    check_ratios(ratios)?;
    if n < 3 {
        return Err(Error::InvalidData(format!(
            "class has {n} records; at least 3 are needed to populate train/valid/test"
        )));
    }
    let valid = ((ratios[1] * n as f64).floor() as usize).max(1);
    let test = ((ratios[2] * n as f64).floor() as usize).max(1);
    Ok((n - valid - test, valid, test))
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    Ok(())
}

/// Shuffle each class independently with `seed` and cut it at the
/// [`split_sizes`] boundaries.
pub fn stratified_split(records: &[ContractRecord], ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
    check_ratios(ratios)?;
    let mut by_class: [Vec<&ContractRecord>; NUM_CLASSES] = Default::default();
    for r in records {
        by_class[r.label.index()].push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitDataset {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        seed,
        ratios,
    };
    for (class, members) in by_class.iter_mut().enumerate() {
        let (n_train, n_valid, _) = split_sizes(members.len(), ratios).map_err(|e| {
            Error::InvalidData(format!("{}: {e}", LabelType::ALL[class]))
        })?;
        members.shuffle(&mut rng);
        for (i, r) in members.iter().enumerate() {
            let dst = if i < n_train {
                &mut out.train
            } else if i < n_train + n_valid {
                &mut out.valid
            } else {
                &mut out.test
            };
            dst.push((*r).clone());
        }
    }
    Ok(out)
}

/// Serialized form of a split: addresses per partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(split: &SplitDataset) -> Self {
        let addrs = |v: &[ContractRecord]| v.iter().map(|r| r.address.clone()).collect();
        SplitManifest {
            seed: split.seed,
            ratios: split.ratios,
            train: addrs(&split.train),
            valid: addrs(&split.valid),
            test: addrs(&split.test),
        }
    }

    /// Rebuild the split from a corpus; every listed address must exist.
    pub fn apply(&self, records: &[ContractRecord]) -> Result<SplitDataset> {
        let index: HashMap<&str, &ContractRecord> =
            records.iter().map(|r| (r.address.as_str(), r)).collect();
        let pick = |addrs: &[String]| -> Result<Vec<ContractRecord>> {
            addrs
                .iter()
                .map(|a| {
                    index
                        .get(a.as_str())
                        .map(|r| (*r).clone())
                        .ok_or_else(|| Error::InvalidData(format!("split lists unknown address {a}")))
                })
                .collect()
        };
        Ok(SplitDataset {
            train: pick(&self.train)?,
            valid: pick(&self.valid)?,
            test: pick(&self.test)?,
            seed: self.seed,
            ratios: self.ratios,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
