use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::encoder::EncoderConfig;
use crate::error::{RelicError, Result};
use crate::store::{AnnConfig, Metric};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Other rows' gold entities.
    #[default]
    InBatch,
    /// Nearest non-gold entities to each context, mined once when the run
    /// starts.
    Hard,
    /// Entities drawn in proportion to corpus frequency.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub log_interval: usize,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_interval: usize,
    pub max_vocab: usize,
    pub freeze_table: bool,
    pub freeze_encoder: bool,
    pub negatives: NegativeMode,
    /// Explicit negatives per example for `hard` and `noise` modes.
    pub num_negatives: usize,
    pub metric: Metric,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub ann: AnnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps: 2000,
            max_lr: 1e-3,
            warmup_frac: 0.1,
            clip_norm: 1.0,
            mask_rate: 0.1,
            seed: 0,
            log_interval: 50,
            checkpoint_interval: 0,
            max_vocab: 30_000,
            freeze_table: false,
            freeze_encoder: false,
            negatives: NegativeMode::InBatch,
            num_negatives: 128,
            metric: Metric::Cosine,
            encoder: EncoderConfig::default(),
            adam: AdamConfig::default(),
            ann: AnnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RelicError::Format(format!("train config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RelicError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| RelicError::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RelicError::Format(format!("serializing train config: {e}")))
    }

    /// Checks the training fields; the encoder config is validated once its
    /// vocabulary size is known.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RelicError::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        if self.negatives == NegativeMode::InBatch && self.batch_size < 2 {
            return bad("in-batch negatives need batch_size >= 2".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if self.max_lr.is_nan() || self.max_lr < 0.0 {
            return bad(format!("max_lr {}", self.max_lr));
        }
        if self.negatives != NegativeMode::InBatch && self.num_negatives == 0 {
            return bad("num_negatives must be positive".into());
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive".into());
        }
        Ok(())
    }
}
