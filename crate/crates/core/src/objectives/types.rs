use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids with blank = 0, sos = vocab − 2, eos = vocab − 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the sequence is a valid CTC / decoder target: content ids only.
    pub fn check_content(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&t| t == 0 || t + 2 >= vocab_size) {
            Some(bad) => Err(Error::Input(format!(
                "token {bad} is not a content id of a vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }

    pub fn words(&self) -> Vec<String> {
        self.ids.iter().map(|t| t.to_string()).collect()
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        Self::new(ids)
    }
}

/// `num_spk × T` binary speaker activity. Rows may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct DiarizationLabels {
    pub activity: Vec<Vec<bool>>,
    pub frame_shift_s: f64,
}

impl DiarizationLabels {
    pub fn new(activity: Vec<Vec<bool>>, frame_shift_s: f64) -> Result<Self> {
        if let Some(first) = activity.first() {
            if activity.iter().any(|r| r.len() != first.len()) {
                return Err(Error::contract("diarization label rows differ in length"));
            }
        }
        Ok(Self {
            activity,
            frame_shift_s,
        })
    }

    pub fn silent(num_spk: usize, frames: usize, frame_shift_s: f64) -> Self {
        Self {
            activity: vec![vec![false; frames]; num_spk],
            frame_shift_s,
        }
    }

    pub fn num_spk(&self) -> usize {
        self.activity.len()
    }

    pub fn frames(&self) -> usize {
        self.activity.first().map_or(0, Vec::len)
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of self.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            activity: perm.iter().map(|&p| self.activity[p].clone()).collect(),
            frame_shift_s: self.frame_shift_s,
        }
    }

    pub fn active_at(&self, t: usize) -> usize {
        self.activity.iter().filter(|r| r[t]).count()
    }

    pub fn inactive_frames(&self) -> usize {
        (0..self.frames()).filter(|&t| self.active_at(t) == 0).count()
    }
}

/// Components of the hybrid objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_attn: f64,
    pub l_s: f64,
    pub total: f64,
}

/// `total = α·l_ctc + (1 − α)·l_attn + l_s`.
pub fn asr_total_loss(l_ctc: f64, l_attn: f64, l_s: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(LossBreakdown {
        l_ctc,
        l_attn,
        l_s,
        total: alpha * l_ctc + (1.0 - alpha) * l_attn + l_s,
    })
}
