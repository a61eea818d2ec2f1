use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which encoder layers carry the time-invariant speaker constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    /// `"top"`, `"all"` or `"none"`.
    Named(String),
    /// Explicit 1-based layer indices.
    List(Vec<usize>),
}

impl LayerSelection {
    pub fn top() -> Self {
        LayerSelection::Named("top".into())
    }

    pub fn resolve(&self, enc_layers: usize) -> Result<Vec<usize>> {
        let mut layers = match self {
            LayerSelection::Named(n) => match n.as_str() {
                "top" => vec![enc_layers],
                "all" => (1..=enc_layers).collect(),
                "none" => Vec::new(),
                other => {
                    return Err(Error::Config(format!(
                        "disentangled layers must be \"top\", \"all\", \"none\" or a list, got {other:?}"
                    )))
                }
            },
            LayerSelection::List(v) => v.clone(),
        };
        layers.sort_unstable();
        layers.dedup();
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > enc_layers) {
            return Err(Error::Config(format!(
                "disentangled layer {bad} outside 1..={enc_layers}"
            )));
        }
        Ok(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ff_inner: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub disentangled: LayerSelection,
    /// 1-based index of the speaker head inside each disentangled layer.
    pub speaker_head: usize,
    /// Content tokens plus blank, sos and eos.
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub lambda_s: f64,
    pub max_len: usize,
    /// Stride-2 mean pooling of input frames before the encoder.
    pub subsample: bool,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 40,
            d_model: 64,
            num_heads: 4,
            head_dim: 16,
            ff_inner: 256,
            enc_layers: 4,
            dec_layers: 2,
            disentangled: LayerSelection::top(),
            speaker_head: 4,
            vocab_size: 23,
            dropout_rate: 0.1,
            lambda_s: 0.1,
            max_len: 4096,
            subsample: false,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-scale ratios: 18 encoder and 6 decoder layers, 4 heads of 64, FF 1024.
    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            num_heads: 4,
            head_dim: 64,
            ff_inner: 1024,
            enc_layers: 18,
            dec_layers: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model != self.num_heads * self.head_dim {
            return fail(format!(
                "d_model {} != num_heads {} x head_dim {}",
                self.d_model, self.num_heads, self.head_dim
            ));
        }
        if self.speaker_head == 0 || self.speaker_head > self.num_heads {
            return fail(format!(
                "speaker_head {} outside 1..={}",
                self.speaker_head, self.num_heads
            ));
        }
        if !(self.lambda_s >= 0.0) || !self.lambda_s.is_finite() {
            return fail(format!("lambda_s must be >= 0, got {}", self.lambda_s));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must leave room for blank, sos, eos and one token".into());
        }
        if self.enc_layers == 0 || self.d_feat == 0 || self.ff_inner == 0 {
            return fail("enc_layers, d_feat and ff_inner must be positive".into());
        }
        self.disentangled.resolve(self.enc_layers)?;
        Ok(())
    }

    /// Resolved, sorted 1-based disentangled layer indices.
    pub fn disentangled_layers(&self) -> Vec<usize> {
        self.disentangled
            .resolve(self.enc_layers)
            .expect("config validated")
    }

    pub fn is_disentangled(&self, layer: usize) -> bool {
        self.disentangled_layers().contains(&layer)
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn sos(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 1
    }

    /// Number of content tokens (ids `1..=n`).
    pub fn content_tokens(&self) -> usize {
        self.vocab_size - 3
    }

    pub fn stride(&self) -> usize {
        if self.subsample {
            2
        } else {
            1
        }
    }
}
