use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub train: Option<LossBreakdown>,
    pub dev: Option<LossBreakdown>,
    /// Loss of the epoch's first batch, before its update.
    pub first_step_loss: f64,
    /// Utterances whose CTC target did not fit their frames.
    pub ctc_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerPoint {
    pub epoch: usize,
    pub split: String,
    pub der: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochReport>,
    /// Epoch whose checkpoint was kept as `best.dtck`.
    pub best_epoch: Option<usize>,
    pub der: Vec<DerPoint>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn der_at(&self, epoch: usize, split: &str) -> Option<f64> {
        self.der.iter().find(|p| p.epoch == epoch && p.split == split).map(|p| p.der)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut text = String::new();
    for v in values {
        text.push_str(&serde_json::to_string(v).map_err(|e| Error::Input(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
