//! EVM bytecode to opcode-mnemonic token streams.
//!
//! PUSH immediates are consumed and never emitted as tokens, so the token
//! vocabulary stays bounded by the instruction set. Undefined bytes all
//! decode to the single reserved token [`INVALID_TOKEN`].

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token emitted for byte values that are not defined instructions.
pub const INVALID_TOKEN: &str = "INVALID";

/// Token PUSH1..PUSH32 map to when push collapsing is enabled.
pub const COLLAPSED_PUSH_TOKEN: &str = "PUSH";

const PUSH1: u8 = 0x60;
const PUSH32: u8 = 0x7f;

#[rustfmt::skip]
static BASE_OPCODES: &[(u8, &str)] = &[
    (0x00, "STOP"), (0x01, "ADD"), (0x02, "MUL"), (0x03, "SUB"), (0x04, "DIV"),
    (0x05, "SDIV"), (0x06, "MOD"), (0x07, "SMOD"), (0x08, "ADDMOD"), (0x09, "MULMOD"),
    (0x0a, "EXP"), (0x0b, "SIGNEXTEND"),
    (0x10, "LT"), (0x11, "GT"), (0x12, "SLT"), (0x13, "SGT"), (0x14, "EQ"),
    (0x15, "ISZERO"), (0x16, "AND"), (0x17, "OR"), (0x18, "XOR"), (0x19, "NOT"),
    (0x1a, "BYTE"), (0x1b, "SHL"), (0x1c, "SHR"), (0x1d, "SAR"),
    (0x20, "KECCAK256"),
    (0x30, "ADDRESS"), (0x31, "BALANCE"), (0x32, "ORIGIN"), (0x33, "CALLER"),
    (0x34, "CALLVALUE"), (0x35, "CALLDATALOAD"), (0x36, "CALLDATASIZE"),
    (0x37, "CALLDATACOPY"), (0x38, "CODESIZE"), (0x39, "CODECOPY"), (0x3a, "GASPRICE"),
    (0x3b, "EXTCODESIZE"), (0x3c, "EXTCODECOPY"), (0x3d, "RETURNDATASIZE"),
    (0x3e, "RETURNDATACOPY"), (0x3f, "EXTCODEHASH"),
    (0x40, "BLOCKHASH"), (0x41, "COINBASE"), (0x42, "TIMESTAMP"), (0x43, "NUMBER"),
    (0x44, "PREVRANDAO"), (0x45, "GASLIMIT"), (0x46, "CHAINID"), (0x47, "SELFBALANCE"),
    (0x48, "BASEFEE"), (0x49, "BLOBHASH"), (0x4a, "BLOBBASEFEE"),
    (0x50, "POP"), (0x51, "MLOAD"), (0x52, "MSTORE"), (0x53, "MSTORE8"), (0x54, "SLOAD"),
    (0x55, "SSTORE"), (0x56, "JUMP"), (0x57, "JUMPI"), (0x58, "PC"), (0x59, "MSIZE"),
    (0x5a, "GAS"), (0x5b, "JUMPDEST"), (0x5c, "TLOAD"), (0x5d, "TSTORE"), (0x5e, "MCOPY"),
    (0x5f, "PUSH0"),
    (0xa0, "LOG0"), (0xa1, "LOG1"), (0xa2, "LOG2"), (0xa3, "LOG3"), (0xa4, "LOG4"),
    (0xf0, "CREATE"), (0xf1, "CALL"), (0xf2, "CALLCODE"), (0xf3, "RETURN"),
    (0xf4, "DELEGATECALL"), (0xf5, "CREATE2"), (0xfa, "STATICCALL"), (0xfd, "REVERT"),
    (0xfe, "INVALID"), (0xff, "SELFDESTRUCT"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpcodeInfo {
    pub mnemonic: &'static str,
    /// Immediate bytes following the opcode (1..=32 for PUSH1..PUSH32).
    pub immediate_bytes: u8,
}

#[derive(Debug, Clone)]
pub struct OpcodeTable {
    entries: Vec<Option<OpcodeInfo>>,
}

impl OpcodeTable {
    pub fn get(&self, byte: u8) -> Option<OpcodeInfo> {
        self.entries[byte as usize]
    }

    pub fn len(&self) -> usize {
        self.entries.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Defined `(byte, info)` pairs in byte order.
    pub fn iter(&self) -> impl Iterator<Item = (u8, OpcodeInfo)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(b, e)| e.map(|info| (b as u8, info)))
    }

    pub fn lookup_mnemonic(&self, mnemonic: &str) -> Option<u8> {
        self.iter()
            .find(|(_, info)| info.mnemonic == mnemonic)
            .map(|(b, _)| b)
    }

    fn build() -> Self {
        let mut entries = vec![None; 256];
        for &(byte, mnemonic) in BASE_OPCODES {
            entries[byte as usize] = Some(OpcodeInfo {
                mnemonic,
                immediate_bytes: 0,
            });
        }
        for byte in PUSH1..=PUSH32 {
            let n = byte - PUSH1 + 1;
            entries[byte as usize] = Some(OpcodeInfo {
                mnemonic: leak_name("PUSH", n),
                immediate_bytes: n,
            });
        }
        for n in 1..=16u8 {
            entries[0x80 + n as usize - 1] = Some(OpcodeInfo {
                mnemonic: leak_name("DUP", n),
                immediate_bytes: 0,
            });
            entries[0x90 + n as usize - 1] = Some(OpcodeInfo {
                mnemonic: leak_name("SWAP", n),
                immediate_bytes: 0,
            });
        }
        OpcodeTable { entries }
    }
}

// Built once per process behind a OnceLock, so the leak is bounded.
fn leak_name(prefix: &str, n: u8) -> &'static str {
    Box::leak(format!("{prefix}{n}").into_boxed_str())
}

/// The canonical EVM instruction table (Cancun instruction set).
pub fn load_opcode_table() -> &'static OpcodeTable {
    static TABLE: OnceLock<OpcodeTable> = OnceLock::new();
    TABLE.get_or_init(OpcodeTable::build)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpcodeSequence {
    pub tokens: Vec<String>,
    #[serde(rename = "byte_len")]
    pub source_len_bytes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisasmOptions {
    /// Map PUSH1..PUSH32 to a single `PUSH` token.
    pub collapse_push: bool,
}

/// Decode a hex string (optional `0x` prefix, any case) into raw bytes.
pub fn decode_hex(bytecode_hex: &str) -> Result<Vec<u8>> {
    let s = bytecode_hex.trim();
    let s = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    if let Some(pos) = s.bytes().position(|c| !c.is_ascii_hexdigit()) {
        return Err(Error::MalformedBytecode {
            offset: pos / 2,
            reason: format!("non-hex character {:?}", s[pos..].chars().next().unwrap()),
        });
    }
    if !s.len().is_multiple_of(2) {
        return Err(Error::MalformedBytecode {
            offset: s.len() / 2,
            reason: "odd number of hex digits".into(),
        });
    }
    hex::decode(s).map_err(|e| Error::MalformedBytecode {
        offset: 0,
        reason: e.to_string(),
    })
}

pub fn disassemble(bytecode_hex: &str, table: &OpcodeTable) -> Result<OpcodeSequence> {
    disassemble_with(bytecode_hex, table, DisasmOptions::default())
}

pub fn disassemble_with(
    bytecode_hex: &str,
    table: &OpcodeTable,
    opts: DisasmOptions,
) -> Result<OpcodeSequence> {
    let bytes = decode_hex(bytecode_hex)?;
    Ok(disassemble_bytes(&bytes, table, opts))
}

pub fn disassemble_bytes(bytes: &[u8], table: &OpcodeTable, opts: DisasmOptions) -> OpcodeSequence {
    let mut tokens = Vec::with_capacity(bytes.len());
    let mut pc = 0;
    while pc < bytes.len() {
        match table.get(bytes[pc]) {
            Some(info) => {
                let is_push = info.immediate_bytes > 0;
                if is_push && opts.collapse_push {
                    tokens.push(COLLAPSED_PUSH_TOKEN.to_string());
                } else {
                    tokens.push(info.mnemonic.to_string());
                }
                pc += 1 + info.immediate_bytes as usize;
            }
            None => {
                tokens.push(INVALID_TOKEN.to_string());
                pc += 1;
            }
        }
    }
    OpcodeSequence {
        tokens,
        source_len_bytes: bytes.len(),
    }
}
