//! Training losses: time-invariant regularizer, CTC, smoothed cross-entropy,
//! the hybrid ASR objective and permutation-free BCE.

mod asr;
mod ce;
mod ctc;
mod pit;
mod time_invariant;
mod types;

pub use asr::{asr_objective, AsrLoss, AsrLossConfig, DEFAULT_ALPHA};
pub use ce::{attention_ce_loss, attention_ce_tape, DEFAULT_SMOOTHING};
pub use ctc::{ctc_loss, ctc_loss_tape, log_softmax_rows, min_frames, CtcLoss};
pub use pit::{pit_bce_loss, pit_bce_tape, PitLoss, MAX_PIT_SPEAKERS};
pub use time_invariant::{time_invariant_loss, time_invariant_loss_batch, time_invariant_loss_tape, LAGS};
pub use types::{asr_total_loss, DiarizationLabels, LossBreakdown, TokenSequence};

pub(crate) use ctc::lse2;

#[cfg(test)]
mod tests;
