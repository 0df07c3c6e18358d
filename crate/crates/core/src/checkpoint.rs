//! Versioned binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"OPSC" | u32 version | u8 kind (0 = lm, 1 = clf) | [u8; 32] vocab hash
//! u32 header length | header JSON (model config + metadata)
//! u32 record count | records...
//! record: u32 name length | name | u8 ndim | u32 dims[ndim] | f32 values
//! ```
//!
//! Values are stored as `f32`; a `Model<f32>` round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};

pub const MAGIC: &[u8; 4] = b"OPSC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Free-form run metadata. Kept sorted so files are deterministic.
    pub metadata: BTreeMap<String, String>,
}

fn kind_byte(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Lm => 0,
        ModelKind::Clf => 1,
    }
}

/// Serialize a model to bytes.
pub fn encode<T: Scalar>(model: &Model<T>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind_byte(model.kind));
    out.extend_from_slice(&model.vocab_hash);
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config,
        metadata: metadata.clone(),
    })?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode(model, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {}", what())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decoded checkpoint contents before model reconstruction.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub vocab_hash: [u8; 32],
    pub header: CheckpointHeader,
    pub store: ParamStore<f32>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, &|| "magic".into())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, not a checkpoint")));
    }
    let version = r.u32(&|| "version".into())?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind = match r.take(1, &|| "model kind".into())?[0] {
        0 => ModelKind::Lm,
        1 => ModelKind::Clf,
        k => return Err(Error::Checkpoint(format!("unknown model kind byte {k}"))),
    };
    let vocab_hash: [u8; 32] = r.take(32, &|| "vocab hash".into())?.try_into().unwrap();
    let hlen = r.u32(&|| "header length".into())? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, &|| "header".into())?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32(&|| "record count".into())? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        let at = |i: usize| move || format!("parameter record {i}");
        let nlen = r.u32(&at(i))? as usize;
        let name = String::from_utf8(r.take(nlen, &at(i))?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("parameter record {i} has a non-UTF-8 name")))?;
        let named = |n: &str| {
            let n = n.to_string();
            move || format!("parameter record {n}")
        };
        let ndim = r.take(1, &named(&name))?[0] as usize;
        if ndim != 2 {
            return Err(Error::Checkpoint(format!("parameter {name} has {ndim} dims, expected 2")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32(&named(&name))? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &named(&name))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(dims, data)?;
        store.add(name, t, 0)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last record", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        kind,
        vocab_hash,
        header,
        store,
    })
}

/// Load a checkpoint, optionally requiring a model kind and a matching
/// vocabulary.
pub fn load_checkpoint<T: Scalar>(path: &Path, expect: Option<ModelKind>, vocab: Option<&Vocab>) -> Result<(Model<T>, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    load_bytes(&bytes, expect, vocab)
}

pub fn load_bytes<T: Scalar>(bytes: &[u8], expect: Option<ModelKind>, vocab: Option<&Vocab>) -> Result<(Model<T>, BTreeMap<String, String>)> {
    let ck = decode(bytes)?;
    if let Some(k) = expect {
        if k != ck.kind {
            return Err(Error::Checkpoint(format!("expected a {k:?} checkpoint, found {:?}", ck.kind)));
        }
    }
    let model = Model::from_store(ck.header.config, ck.kind, ck.vocab_hash, ck.store)?;
    if let Some(v) = vocab {
        model.check_vocab(v)?;
    }
    Ok((model.cast(), ck.header.metadata))
}
