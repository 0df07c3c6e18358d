//! Synthetic labelled corpus: one planted opcode motif per class inside
//! random opcode noise, written as bytecode.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelType, RawRecord};
use crate::disasm::load_opcode_table;
use crate::error::{Error, Result};

/// Opcodes the noise and the motifs are drawn from.
pub const NOISE_OPCODES: &[&str] = &[
    "PUSH1", "PUSH2", "PUSH4", "PUSH32", "DUP1", "DUP2", "DUP3", "SWAP1", "SWAP2", "POP", "ADD", "SUB", "MUL", "DIV",
    "AND", "OR", "EQ", "LT", "GT", "ISZERO", "NOT", "SHL", "SHR", "MLOAD", "MSTORE", "SLOAD", "SSTORE", "JUMP",
    "JUMPI", "JUMPDEST", "CALLER", "CALLVALUE", "CALLDATALOAD", "CALLDATASIZE", "KECCAK256", "RETURN", "REVERT",
    "CALL", "GAS", "ADDRESS",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub per_class: usize,
    /// Mean opcode count per contract.
    pub mean_len: usize,
    /// Lengths are uniform in `mean_len ± len_jitter`.
    pub len_jitter: usize,
    pub motif_len: usize,
    /// Times each contract's class motif is planted.
    pub motif_repeats: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class: 50,
            mean_len: 120,
            len_jitter: 40,
            motif_len: 6,
            motif_repeats: 3,
        }
    }
}

/// Motif per class, in class order.
pub fn motifs(cfg: &SynthConfig, seed: u64) -> Vec<Vec<&'static str>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6673);
    let mut out: Vec<Vec<&'static str>> = Vec::new();
    while out.len() < LabelType::ALL.len() {
        let m: Vec<&str> = (0..cfg.motif_len).map(|_| *NOISE_OPCODES.choose(&mut rng).unwrap()).collect();
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out
}

fn encode(ops: &[&str], rng: &mut ChaCha8Rng) -> String {
    let table = load_opcode_table();
    let mut bytes = Vec::with_capacity(ops.len() * 2);
    for op in ops {
        let b = table.lookup_mnemonic(op).expect("noise opcodes are in the table");
        bytes.push(b);
        for _ in 0..table.get(b).expect("known opcode").immediate_bytes {
            bytes.push(rng.gen());
        }
    }
    format!("0x{}", hex::encode(bytes))
}

/// Generate `per_class` contracts for each of the four classes, in class
/// order. Deterministic in `seed`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<RawRecord>> {
    if cfg.per_class == 0 || cfg.motif_len == 0 || cfg.motif_repeats == 0 {
        return Err(Error::InvalidArgument(format!("bad synth config {cfg:?}")));
    }
    let min_len = cfg.mean_len.saturating_sub(cfg.len_jitter);
    if min_len < cfg.motif_len * cfg.motif_repeats {
        return Err(Error::InvalidArgument(format!(
            "minimum length {min_len} cannot hold {} motifs of length {}",
            cfg.motif_repeats, cfg.motif_len
        )));
    }
    let motifs = motifs(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.per_class * motifs.len());
    for (label, motif) in LabelType::ALL.iter().zip(&motifs) {
        for i in 0..cfg.per_class {
            let len = rng.gen_range(min_len..=cfg.mean_len + cfg.len_jitter);
            let noise_len = len - cfg.motif_len * cfg.motif_repeats;
            let mut ops: Vec<&str> = (0..noise_len).map(|_| *NOISE_OPCODES.choose(&mut rng).unwrap()).collect();
            // insertion points, applied back to front so they stay valid
            let mut at: Vec<usize> = (0..cfg.motif_repeats).map(|_| rng.gen_range(0..=noise_len)).collect();
            at.sort_unstable_by(|a, b| b.cmp(a));
            for pos in at {
                ops.splice(pos..pos, motif.iter().copied());
            }
            out.push(RawRecord {
                address: format!("0x{:02x}{:038x}", label.number(), i),
                bytecode: Some(encode(&ops, &mut rng)),
                tokens: None,
                label: label.number(),
            });
        }
    }
    Ok(out)
}
