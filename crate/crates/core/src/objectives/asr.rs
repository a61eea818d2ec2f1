use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Float, Tape, Var};
use crate::model::{Dropout, FeatureSequence, Model};

use super::ce::{attention_ce_tape, DEFAULT_SMOOTHING};
use super::ctc::ctc_loss_tape;
use super::time_invariant::time_invariant_loss_tape;
use super::types::{asr_total_loss, LossBreakdown};

pub const DEFAULT_ALPHA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrLossConfig {
    pub alpha: f64,
    pub smoothing: f64,
}

impl Default for AsrLossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AsrLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Utterances whose CTC target was infeasible and left out of `l_ctc`.
    pub ctc_skipped: usize,
}

/// Hybrid objective of a batch of `(features, content tokens)` pairs on
/// `tape`. The regularizer uses the model's `lambda_s` and is absent from the
/// graph when that is 0.
pub fn asr_objective<F: Float>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    params: &[Var],
    batch: &[(&FeatureSequence, &[usize])],
    cfg: &AsrLossConfig,
    dropout: &mut Dropout,
) -> Result<AsrLoss> {
    if batch.is_empty() {
        return Err(Error::contract("asr_objective: empty batch"));
    }
    let c = &model.config;
    let feats: Vec<&FeatureSequence> = batch.iter().map(|b| b.0).collect();
    let trace = model.encode(tape, params, &feats, dropout)?;

    let ctc_logits = model.ctc_logits(tape, params, trace.states)?;
    let mut ctc_terms = Vec::new();
    for (i, (_, y)) in batch.iter().enumerate() {
        let rows = trace.packed.valid_rows(i);
        if let Some(l) = ctc_loss_tape(tape, ctc_logits, &rows, y, c.blank())? {
            ctc_terms.push(l);
        }
    }
    let ctc_skipped = batch.len() - ctc_terms.len();

    let inputs: Vec<Vec<usize>> = batch
        .iter()
        .map(|(_, y)| std::iter::once(c.sos()).chain(y.iter().copied()).collect())
        .collect();
    let targets: Vec<usize> = batch
        .iter()
        .flat_map(|(_, y)| y.iter().copied().chain(std::iter::once(c.eos())))
        .collect();
    let input_refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = model.decode(
        tape,
        params,
        &input_refs,
        trace.states,
        &trace.packed.segments,
        &trace.packed.valid,
        dropout,
    )?;
    let l_attn = attention_ce_tape(tape, logits, &targets, cfg.smoothing)?;

    let alpha = F::of(cfg.alpha);
    let attn_w = F::of(1.0 - cfg.alpha);
    let mut parts = Vec::with_capacity(3);
    let l_ctc = if ctc_terms.is_empty() {
        None
    } else {
        let s = tape.add_n(&ctc_terms)?;
        Some(tape.scale(s, F::of(1.0 / ctc_terms.len() as f64)))
    };
    if let Some(l) = l_ctc {
        parts.push(tape.scale(l, alpha));
    }
    parts.push(tape.scale(l_attn, attn_w));
    let l_s = if c.lambda_s > 0.0 && !c.disentangled_layers().is_empty() {
        let tracks = model.speaker_tracks(&trace);
        let l = time_invariant_loss_tape(tape, &tracks, &trace.packed, c.lambda_s)?;
        parts.push(l);
        Some(l)
    } else {
        None
    };
    let total = tape.add_n(&parts)?;
    let item = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v).as_f64());
    let breakdown = asr_total_loss(item(l_ctc), tape.item(l_attn).as_f64(), item(l_s), cfg.alpha)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
    }
    Ok(AsrLoss {
        total,
        breakdown,
        ctc_skipped,
    })
}
