//! CTC greedy decoding, incremental CTC prefix scores and joint
//! CTC/attention beam search.

mod beam;
mod ctc_prefix;

pub use beam::{
    greedy_attention_decode, joint_beam_search, AttentionScorer, BeamConfig, BeamResult, Hypothesis, ModelScorer,
    Symbols,
};
pub use ctc_prefix::{ctc_greedy_decode, CtcPrefixScorer, CtcPrefixState};

use crate::error::Result;
use crate::grad::{Float, Tape, Tensor};
use crate::model::{Dropout, FeatureSequence, Model};

/// Encodes one utterance and runs the joint search on it.
pub fn recognize<F: Float>(model: &Model<F>, features: &FeatureSequence, cfg: &BeamConfig) -> Result<BeamResult> {
    let mut tape = Tape::inference();
    let p = model.params.bind(&mut tape);
    let trace = model.encode(&mut tape, &p, &[features], &mut Dropout::off())?;
    let logits = model.ctc_logits(&mut tape, &p, trace.states)?;
    let v = model.config.vocab_size;
    let rows = trace.packed.valid_rows(0);
    let ctc: Vec<f64> = rows
        .iter()
        .flat_map(|&r| tape.value(logits)[r * v..(r + 1) * v].iter().map(|x| x.as_f64()))
        .collect();
    let d = model.config.d_model;
    let memory = Tensor::new(vec![trace.packed.rows(), d], tape.value(trace.states).to_vec())?;
    let mut scorer = ModelScorer::new(model, memory, trace.packed.valid.clone());
    joint_beam_search(&mut scorer, &ctc, cfg, Symbols::for_vocab(v))
}

#[cfg(test)]
mod tests;
