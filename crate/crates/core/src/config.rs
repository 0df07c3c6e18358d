//! Run configuration file (TOML). Every section and key is optional;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_RATIOS;
use crate::error::{Error, Result};
use crate::model::{Dropouts, ModelConfig};
use crate::synth::SynthConfig;
use crate::trainer::{ClfTrainConfig, LmTrainConfig, LrFindConfig};

/// File name the effective configuration is echoed to in run directories.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Train / valid / test fractions.
    pub ratios: [f64; 3],
    /// Tokens seen fewer times in the training split map to `<unk>`.
    pub min_freq: usize,
    /// Emit a bare `PUSH` for every PUSH width.
    pub collapse_push: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            ratios: DEFAULT_RATIOS,
            min_freq: 1,
            collapse_push: false,
        }
    }
}

/// Model hyperparameters minus the vocabulary size, which comes from the
/// prepared vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub emb_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub tie_weights: bool,
    pub head_hidden: usize,
    pub dropouts: Dropouts,
    pub ar_alpha: f64,
    pub tar_beta: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::desk(1);
        ModelSettings {
            emb_size: m.emb_size,
            hidden_size: m.hidden_size,
            n_layers: m.n_layers,
            tie_weights: m.tie_weights,
            head_hidden: m.head_hidden,
            dropouts: m.dropouts,
            ar_alpha: m.ar_alpha,
            tar_beta: m.tar_beta,
        }
    }
}

impl ModelSettings {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            emb_size: self.emb_size,
            hidden_size: self.hidden_size,
            n_layers: self.n_layers,
            tie_weights: self.tie_weights,
            head_hidden: self.head_hidden,
            dropouts: self.dropouts,
            ar_alpha: self.ar_alpha,
            tar_beta: self.tar_beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelSettings,
    pub lm: LmTrainConfig,
    pub clf: ClfTrainConfig,
    pub lr_find: LrFindConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Write the effective configuration into a run directory.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.clf.validate()?;
        self.model
            .with_vocab(1)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        crate::corpus::split_sizes(100, self.corpus.ratios).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        c.clf.stop_at_fbeta = Some(0.95);
        c.model.dropouts.weight = 0.2;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[lm]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml("[model.dropouts]\nfoo = 0.1").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[lm]\nbatch_size = 0").is_err());
        assert!(RunConfig::from_toml("[model.dropouts]\nweight = 1.0").is_err());
        assert!(RunConfig::from_toml("[clf]\nlr_lo = 0.5\nlr_hi = 0.1").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[clf]\nepochs = 3\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.clf.epochs, 3);
        assert_eq!(c.clf.batch_size, ClfTrainConfig::default().batch_size);
    }
}
