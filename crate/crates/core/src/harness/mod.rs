//! Training, evaluation, checkpoints and the dataset protocols.

mod batch;
mod checkpoint;
mod optim;
mod protocol;
mod results;
mod train;

use serde::{Deserialize, Serialize};

use crate::assembly::HeadKind;
use crate::backbone::BackboneKind;
use crate::data::DatasetKind;
use crate::detect::DecodeConfig;
use crate::error::{Error, Result};

pub use batch::{augment, image_tensor, Batch, PreparedImage, Preprocessor};
pub use checkpoint::{load_checkpoint, read_checkpoint_config, save_checkpoint, CHECKPOINT_FORMAT};
pub use optim::{clip_grad_norm, Optimizer, SgdMomentum};
pub use protocol::{run_protocol, Protocol, ProtocolData, ProtocolReport, RunRecord};
pub use results::{read_results, write_history_csv, write_results, ResultsFile, RESULTS_SCHEMA_VERSION};
pub use train::{evaluate, train, EarlyStopper, EpochRecord, Evaluation, RunResult, StopDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// The only early-stopping criterion: validation mAP50:95.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EarlyStopMetric {
    #[default]
    #[serde(rename = "map50_95")]
    Map50_95,
}

/// Training-time augmentation, applied per sample with a seeded stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    /// Images are rescaled by a factor drawn from `[1 - j, 1 + j]`.
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            hflip_prob: 0.5,
            scale_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Micro-batches summed into each optimizer step.
    pub accumulate: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub seed: u64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub augment: AugmentConfig,
    /// Thresholds used for validation and evaluation.
    pub decode: DecodeConfig,
    /// Validate every n epochs (the last epoch is always validated).
    pub val_interval: usize,
    /// Stop as soon as validation mAP50 reaches this value.
    pub target_map50: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            learning_rate: 0.000714,
            momentum: 0.937,
            weight_decay: 0.0,
            batch_size: 18,
            accumulate: 1,
            max_epochs: 100,
            early_stop_patience: 20,
            early_stop_metric: EarlyStopMetric::Map50_95,
            seed: 0,
            grad_clip: None,
            augment: AugmentConfig::default(),
            decode: DecodeConfig::default(),
            val_interval: 1,
            target_map50: None,
        }
    }
}

impl TrainConfig {
    /// Default optimizer settings per dataset and detector.
    ///
    /// On EDS the transformer-head/hybrid-backbone detector uses SGD and the
    /// other three AdamW; on HiXray and PIDray every detector uses SGD.
    pub fn reference_regime(dataset: DatasetKind, head: HeadKind, backbone: BackboneKind) -> Self {
        let sgd = Self {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.937,
            ..Self::default()
        };
        match dataset {
            DatasetKind::Eds if !(head == HeadKind::Rtdetr && backbone == BackboneKind::NextvitS) => Self {
                optimizer: OptimizerKind::Adamw,
                learning_rate: 0.000714,
                ..Self::default()
            },
            _ => sgd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.accumulate == 0 {
            return Err(Error::Config("batch_size and accumulate must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.val_interval == 0 {
            return Err(Error::Config("val_interval must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight_decay be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) || !(0.0..1.0).contains(&self.augment.scale_jitter) {
            return Err(Error::Config("augmentation probabilities out of range".into()));
        }
        if self.target_map50.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Config("target_map50 must lie in [0, 1]".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.decode.validate()
    }
}
