//! Opcode-sequence classification of EVM smart contracts into Suicidal,
//! Prodigal, Greedy and Normal classes with a pretrained AWD-LSTM encoder.
//!
//! Pipeline: [`disasm`] turns bytecode into opcode tokens, [`corpus`]
//! prepares labelled datasets, [`model`] holds the encoder / language-model
//! decoder / classifier head built on the [`autodiff`] engine, [`trainer`]
//! runs language-model pretraining and classifier fine-tuning, and
//! [`metrics`] evaluates predictions.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod disasm;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
