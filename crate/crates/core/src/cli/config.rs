//! Run configuration shared by `train`, `eval` and the store commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chaos01::CSchedule;
use crate::error::{Error, Result};
use crate::net::data::{SplitFractions, SplitMode};
use crate::net::{ModelConfig, TrainConfig};
use crate::signal::PreprocessMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub featurizer: FeaturizerConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub store: StoreConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory of PPG files; files sharing a subject id are separate
    /// sessions of that subject. Synthesized from the default registry when
    /// absent.
    pub ppg_dir: Option<PathBuf>,
    pub subjects: usize,
    /// Total seconds per synthetic subject, split evenly across sessions.
    pub duration_s: f64,
    /// Independent synthetic recordings per subject.
    pub sessions: usize,
    pub segments_per_subject: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            ppg_dir: None,
            subjects: 8,
            duration_s: 60.0,
            sessions: 5,
            segments_per_subject: 150,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub mode: PreprocessMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            mode: PreprocessMode::Band05_8Norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizerConfig {
    pub c: CSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `full`, `mini` or `tiny`.
    pub preset: String,
    /// Full architecture; replaces the preset when given.
    pub config: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "mini".into(),
            config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub split: SplitMode,
    pub fractions: SplitFractions,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub steps_per_epoch: usize,
    pub val_pairs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            split: SplitMode::DataDisjoint,
            fractions: SplitFractions::default(),
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            early_stop_patience: t.early_stop_patience,
            steps_per_epoch: t.steps_per_epoch,
            val_pairs: t.val_pairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Balanced genuine/impostor pairs drawn from the test partition.
    pub test_pairs: usize,
    pub batch: usize,
    /// Identification probes per test subject; 0 skips rank-1.
    pub rank1_probes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_pairs: 400,
            batch: 16,
            rank1_probes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    pub dir: PathBuf,
    pub overwrite: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            dir: PathBuf::from("store"),
            overwrite: false,
        }
    }
}

impl RunConfig {
    /// Every section at its default.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            dataset: DatasetConfig::default(),
            preprocess: PreprocessConfig::default(),
            featurizer: FeaturizerConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            store: StoreConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::param("cli", format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = match &self.model.config {
            Some(c) => c.clone(),
            None => ModelConfig::preset(&self.model.preset)
                .ok_or_else(|| Error::param("cli", format!("unknown model preset {:?}", self.model.preset)))?,
        };
        let c = base.with_seed(self.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            early_stop_patience: t.early_stop_patience,
            steps_per_epoch: t.steps_per_epoch,
            val_pairs: t.val_pairs,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.subjects < 2 {
            return Err(Error::param("cli", "dataset.subjects must be at least 2"));
        }
        if !(d.duration_s > 0.0) || !d.duration_s.is_finite() {
            return Err(Error::param("cli", "dataset.duration_s must be positive"));
        }
        if d.sessions == 0 || d.segments_per_subject < 3 * d.sessions {
            return Err(Error::param("cli", "dataset.sessions must be positive with at least 3 segments each"));
        }
        if d.ppg_dir.is_none() && d.duration_s / (d.sessions as f64) < 4.0 {
            return Err(Error::param("cli", "synthetic sessions must last at least 4 s"));
        }
        if self.eval.test_pairs == 0 || self.eval.batch == 0 {
            return Err(Error::param("cli", "eval.test_pairs and eval.batch must be positive"));
        }
        for p in self.featurizer.c.channel_params() {
            p.validate()?;
        }
        self.model_config()?;
        self.train_config().validate()
    }
}
