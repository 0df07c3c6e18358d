use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::ContractRecord;
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    itos: Vec<String>,
    stoi: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let itos: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(tokens).collect();
        let stoi = itos.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { itos, stoi }
    }

    pub fn len(&self) -> usize {
        self.itos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.itos.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        match self.stoi.get(token) {
            Some(&id) if id >= RESERVED.len() => id,
            _ => UNK_ID,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.itos.get(id).map(String::as_str)
    }

    /// Canonical `token<TAB>id` serialization, one entry per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.itos.iter().enumerate() {
            s.push_str(t);
            s.push('\t');
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidData(format!("vocab line {}: expected token<TAB>id", i + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::InvalidData(format!("vocab line {}: bad id {id:?}", i + 1)))?;
            if id != i {
                return Err(Error::InvalidData(format!("vocab line {}: id {id} out of sequence", i + 1)));
            }
            if i < RESERVED.len() {
                if tok != RESERVED[i] {
                    return Err(Error::InvalidData(format!("vocab line {}: expected reserved {}", i + 1, RESERVED[i])));
                }
            } else {
                tokens.push(tok.to_string());
            }
        }
        if tokens.is_empty() && text.lines().count() < RESERVED.len() {
            return Err(Error::InvalidData("vocab file is missing reserved entries".into()));
        }
        let v = Vocab::from_tokens(tokens);
        if v.stoi.len() != v.itos.len() {
            return Err(Error::InvalidData("vocab file has duplicate tokens".into()));
        }
        Ok(v)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_tsv().as_bytes()).into()
    }

    pub fn content_hash_hex(&self) -> String {
        hex::encode(self.content_hash())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Ids are assigned by descending frequency after the reserved entries,
/// ties broken lexicographically.
pub fn build_vocab(train: &[ContractRecord], min_freq: usize) -> Result<Vocab> {
    if train.is_empty() {
        return Err(Error::InvalidData("cannot build a vocabulary from an empty training split".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for r in train {
        for t in &r.tokens {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocab::from_tokens(entries.into_iter().map(|(t, _)| t.to_string())))
}

/// BOS followed by one id per token; unknown tokens map to UNK.
pub fn numericalize(tokens: &[String], vocab: &Vocab) -> Vec<usize> {
    std::iter::once(BOS_ID)
        .chain(tokens.iter().map(|t| vocab.id(t)))
        .collect()
}
