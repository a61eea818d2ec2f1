//! Recognition and diarization scoring, plus head-wise embedding probes.

mod der;
mod probe;
mod wer;

use serde::{Deserialize, Serialize};

pub use der::{
    best_permutation_mapping, der, der_counts, median_filter, speaker_error_time, DerBreakdown, DerCounts,
    DEFAULT_MEDIAN_WINDOW, MAX_SCORED_SPEAKERS,
};
pub use probe::{fisher_separability, pca_project, temporal_smoothness, temporal_step_norms, Projection};
pub use wer::{wer, WerBreakdown};

/// Scoring summary; fields not produced by a task are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub wer: Option<f64>,
    pub der: Option<f64>,
    pub miss: Option<f64>,
    pub fa: Option<f64>,
    pub conf: Option<f64>,
    pub spk_err_s: Option<f64>,
}

impl ScoreSummary {
    pub fn from_wer(w: &WerBreakdown) -> Self {
        Self {
            wer: Some(w.wer),
            ..Default::default()
        }
    }

    /// Miss, false alarm and confusion as fractions of reference speech.
    pub fn from_der(c: &DerCounts, frame_shift_s: f64) -> Self {
        let b = c.breakdown(frame_shift_s);
        let frac = |x: usize| if c.speech > 0 { x as f64 / c.speech as f64 } else { 0.0 };
        Self {
            der: Some(b.der),
            miss: Some(frac(c.missed)),
            fa: Some(frac(c.false_alarm)),
            conf: Some(frac(c.confusion)),
            spk_err_s: Some(speaker_error_time(&b)),
            ..Default::default()
        }
    }
}

/// One probe line; `layer` and `head` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer: usize,
    pub head: usize,
    pub smoothness: f64,
    /// `None` when fewer than two speakers are present.
    pub fisher: Option<f64>,
    pub n_frames: usize,
}
