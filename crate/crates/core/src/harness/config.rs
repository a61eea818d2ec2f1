use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::model::{LayerSelection, ModelConfig};
use crate::objectives::AsrLossConfig;
use crate::synth::CorpusConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradient L2 norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_steps: 300,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiarConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs after which DER is measured.
    pub report_epochs: Vec<usize>,
    pub median_window: usize,
    pub collar_s: f64,
    pub threshold: f64,
}

impl Default for DiarConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            report_epochs: vec![5, 10],
            median_window: 11,
            collar_s: 0.0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    /// Overrides `model.disentangled` when set.
    pub layers: Option<LayerSelection>,
    /// Forces `lambda_s = 0`: the plain transformer control.
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: AsrLossConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub diar: DiarConfig,
    pub decode: BeamConfig,
    pub mode: ModeConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of [`to_toml`](Self::to_toml), hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Seeds training, parameter initialisation and the diarization head.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.model.init_seed = seed;
        self
    }

    /// Model configuration after the mode flags are applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(l) = &self.mode.layers {
            m.disentangled = l.clone();
        }
        if self.mode.baseline {
            m.lambda_s = 0.0;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.effective_model();
        m.validate()?;
        self.decode.validate()?;
        self.corpus.validate()?;
        if m.d_feat != self.corpus.generator.d_feat {
            return Err(Error::Config(format!(
                "model.d_feat {} differs from corpus.generator.d_feat {}",
                m.d_feat, self.corpus.generator.d_feat
            )));
        }
        if m.vocab_size != self.corpus.vocab_size() {
            return Err(Error::Config(format!(
                "model.vocab_size {} differs from the corpus vocabulary {}",
                m.vocab_size,
                self.corpus.vocab_size()
            )));
        }
        if self.train.batch_size == 0 || self.diar.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.loss.alpha) {
            return Err(Error::Config(format!("loss.alpha {} outside [0, 1]", self.loss.alpha)));
        }
        if self.diar.median_window % 2 == 0 {
            return Err(Error::Config("diar.median_window must be odd".into()));
        }
        if !(self.optim.peak_lr > 0.0 && self.diar.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}
