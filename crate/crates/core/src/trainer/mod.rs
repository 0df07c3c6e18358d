//! Language-model pretraining and classifier fine-tuning.

mod clf;
mod lm;
mod lr_find;
mod schedule;

pub use clf::{argmax, evaluate_clf, predict_clf, train_clf, ClfProbe, ClfTrainConfig, Evaluation};
pub use lm::{lm_eval_loss, train_lm, LmProbe, LmTrainConfig};
pub use lr_find::{lr_find, LrFindConfig, LrFinderResult, LrPoint, LrProbe, MIN_POINTS};
pub use schedule::{discriminative_lrs, OneCycleConfig, OneCycleSchedule};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Optimizer, ParamStore, Scalar};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;

/// One line of `history.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Weighted validation F-score; absent for language models.
    pub valid_fbeta: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub unfreeze_stage: usize,
    pub optimizer: Optimizer<T>,
    /// Validation loss for language models, weighted F for classifiers.
    pub best_metric: Option<f64>,
    /// 1-based epoch the best weights come from.
    pub best_epoch: Option<usize>,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> TrainState<T> {
    fn new(optimizer: Optimizer<T>, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            unfreeze_stage: 0,
            optimizer,
            best_metric: None,
            best_epoch: None,
            seed,
            history: Vec::new(),
        }
    }

    /// First 1-based epoch whose validation F reached `target`.
    pub fn epochs_to_target(&self, target: f64) -> Option<usize> {
        self.history
            .iter()
            .find(|r| r.valid_fbeta.is_some_and(|f| f >= target))
            .map(|r| r.epoch)
    }
}

/// Where a training run writes its files. Every method is a no-op when the
/// run has no output directory.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    dir: Option<PathBuf>,
    /// Extra checkpoint metadata.
    pub metadata: BTreeMap<String, String>,
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FBETA_CSV: &str = "fbeta.csv";

impl RunArtifacts {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn in_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let hist = dir.join(HISTORY_FILE);
        std::fs::write(&hist, "").map_err(|e| Error::io(&hist, e))?;
        Ok(RunArtifacts {
            dir: Some(dir),
            metadata: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn append_history(&self, rec: &EpochRecord) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(HISTORY_FILE);
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&path, e))
    }

    fn save_best<T: Scalar>(&self, model: &Model<T>, epoch: usize) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut meta = self.metadata.clone();
        meta.insert("epoch".into(), epoch.to_string());
        save_checkpoint(model, &dir.join(BEST_CHECKPOINT), &meta)
    }

    fn write_fbeta_csv(&self, history: &[EpochRecord]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut s = String::from("epoch,fbeta\n");
        for r in history {
            if let Some(f) = r.valid_fbeta {
                s.push_str(&format!("{},{}\n", r.epoch, f));
            }
        }
        let path = dir.join(FBETA_CSV);
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }
}

/// Rescale gradients so their global norm is at most `max_norm`
/// (0 disables clipping).
fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grads.global_norm();
        if norm > max_norm {
            grads.scale(T::lit(max_norm / norm));
        }
    }
}

fn non_finite<T: Scalar>(model: &mut Model<T>, best: &Option<ParamStore<T>>, what: String) -> Error {
    if let Some(b) = best {
        model.store.copy_values_from(b);
    }
    Error::NonFinite(what)
}
