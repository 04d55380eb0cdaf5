//! Mask-rate ablation: one model per rate on a shared seed, each scored on
//! held-out linking and entity typing.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::{MentionRecord, TypingRecord, Vocab};
use crate::error::{RelicError, Result};
use crate::eval::{evaluate_typing, linking_eval, ProbeConfig};
use crate::trainer::{train, Checkpoint, TrainConfig, TrainData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rates: Vec<f64>,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Every `holdout_every`-th mention is held out of training and used
    /// for the linking evaluation.
    pub holdout_every: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            rates: vec![0.0, 0.1, 0.5, 1.0],
            train: TrainConfig {
                total_steps: 1000,
                ..TrainConfig::default()
            },
            probe: ProbeConfig {
                lr: 1e-3,
                max_epochs: 500,
                ..ProbeConfig::default()
            },
            holdout_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mask_rate: f64,
    pub linking_accuracy: f64,
    pub typing_map: f64,
    pub typing_micro_f1: f64,
    pub final_in_batch_accuracy: f64,
}

/// Rates in first-seen order with duplicates removed (with a warning).
pub fn dedup_rates(rates: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(rates.len());
    for &r in rates {
        if out.contains(&r) {
            warn!("mask rate {r} listed more than once; running it once");
        } else {
            out.push(r);
        }
    }
    out
}

/// Split mentions into (training, held-out) by position.
pub fn holdout_split(records: &[MentionRecord], every: usize) -> (Vec<MentionRecord>, Vec<MentionRecord>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if every > 1 && i % every == every - 1 {
            held.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, held)
}

pub fn ablate_mask(
    records: &[MentionRecord],
    labels: &[TypingRecord],
    vocab: &Vocab,
    entity_ids: &[String],
    config: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let rates = dedup_rates(&config.rates);
    if rates.is_empty() {
        return Err(RelicError::Empty("no mask rates to run".into()));
    }
    let (train_set, held) = holdout_split(records, config.holdout_every);
    if held.is_empty() {
        return Err(RelicError::InvalidArgument("holdout leaves no mentions for linking".into()));
    }
    let mut rows = Vec::with_capacity(rates.len());
    for rate in rates {
        let mut cfg = config.train.clone();
        cfg.mask_rate = rate;
        let mut ckpt = Checkpoint::init(&cfg, vocab.clone(), entity_ids.to_vec())?;
        let report = train(&mut ckpt, TrainData::Mentions(&train_set), None)?;
        let link = linking_eval(&ckpt, &held, None, None)?;
        let mut probe = config.probe.clone();
        probe.seed = cfg.seed;
        let typing = evaluate_typing(&ckpt.table, labels, &probe)?;
        let row = AblationRow {
            mask_rate: rate,
            linking_accuracy: link.accuracy,
            typing_map: typing.metrics.map,
            typing_micro_f1: typing.metrics.micro_f1,
            final_in_batch_accuracy: report.last().map_or(0.0, |m| m.accuracy),
        };
        info!(
            "mask rate {rate}: linking {:.3}, typing MAP {:.3}",
            row.linking_accuracy, row.typing_map
        );
        rows.push(row);
    }
    Ok(rows)
}
