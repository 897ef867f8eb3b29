//! Experiment configuration: a JSON document with a strict schema. Unknown
//! keys are errors, since a typo in an ablation grid silently running the
//! wrong experiment is the costliest failure mode.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use finsent_core::model::{HeadSource, ModelConfig};
use finsent_core::schedule::TrainingPlan;
use finsent_core::train::{FinetuneSettings, PretrainSettings};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Pretrain,
    FinetuneCls,
    FinetuneReg,
    AblateStrategies,
    AblateLayers,
    AblateLastk,
    AblatePretraining,
    SizeSweep,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub phrasebank: Option<PathBuf>,
    #[serde(default)]
    pub fiqa: Option<PathBuf>,
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub keywords: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub preset: String,
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default)]
    pub warmup_proportion: Option<f64>,
    #[serde(default)]
    pub discrimination_rate: Option<f64>,
    #[serde(default)]
    pub unfreeze_interval: Option<f64>,
    #[serde(default)]
    pub freeze_last_k: Option<usize>,
    #[serde(default)]
    pub head_source: Option<HeadSource>,
}

impl PlanConfig {
    pub fn to_plan(&self) -> Result<TrainingPlan, ConfigError> {
        let mut plan = TrainingPlan::from_name(&self.preset)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(lr) = self.peak_lr {
            plan.peak_lr = lr;
        }
        if let Some(w) = self.warmup_proportion {
            plan.warmup_proportion = w;
        }
        if let Some(d) = self.discrimination_rate {
            plan.discrimination_rate = d;
        }
        if let Some(u) = self.unfreeze_interval {
            plan.unfreeze_interval = u;
        }
        if let Some(k) = self.freeze_last_k {
            plan = plan.with_freeze_last_k(k);
        }
        if let Some(h) = self.head_source {
            plan.head_source = h;
        }
        plan.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(plan)
    }
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            preset: "ALL".into(),
            peak_lr: None,
            warmup_proportion: None,
            discrimination_rate: None,
            unfreeze_interval: None,
            freeze_last_k: None,
            head_source: None,
        }
    }
}

fn default_epochs() -> usize {
    6
}
fn default_batch() -> usize {
    64
}
fn default_kfold() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default = "default_kfold")]
    pub kfold: usize,
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub stratified_split: bool,
    #[serde(default)]
    pub last_k_grid: Option<Vec<usize>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            max_len: None,
            kfold: default_kfold(),
            sizes: None,
            stratified_split: false,
            last_k_grid: None,
        }
    }
}

fn default_pretrain_epochs() -> usize {
    3
}
fn default_mask_rate() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default)]
    pub nsp: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: default_pretrain_epochs(),
            batch_size: default_batch(),
            mask_rate: default_mask_rate(),
            peak_lr: None,
            nsp: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let content = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let config: ExperimentConfig =
            serde_json::from_str(&content).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.plan.to_plan()?;
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds list is empty".into()));
        }
        if self.train.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn finetune_settings(&self, seed: u64) -> FinetuneSettings {
        FinetuneSettings {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            max_len: self.train.max_len.unwrap_or(self.model.max_seq_len),
            seed,
        }
    }

    pub fn pretrain_settings(&self, seed: u64) -> PretrainSettings {
        PretrainSettings {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            max_len: self.train.max_len.unwrap_or(self.model.max_seq_len),
            mask_rate: self.pretrain.mask_rate,
            seed,
        }
    }

    /// The pre-training learning-rate plan: constant rate, no freezing.
    pub fn pretrain_plan(&self) -> Result<TrainingPlan, ConfigError> {
        let mut plan =
            TrainingPlan::from_name("NA").map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(lr) = self.pretrain.peak_lr {
            plan.peak_lr = lr;
        } else if let Some(lr) = self.plan.peak_lr {
            plan.peak_lr = lr;
        }
        Ok(plan)
    }
}
