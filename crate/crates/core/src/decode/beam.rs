use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Float, Tape, Tensor};
use crate::model::{Dropout, Model};
use crate::objectives::log_softmax_rows;

use super::ctc_prefix::{CtcPrefixScorer, CtcPrefixState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub ctc_weight: f64,
    /// `None` bounds the output by the number of encoder frames.
    pub max_output_len: Option<usize>,
    /// Added per emitted token (eos excluded).
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 8,
            ctc_weight: 0.3,
            max_output_len: None,
            length_penalty: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        Ok(())
    }
}

/// Next-token log-probabilities from the attention decoder.
pub trait AttentionScorer {
    fn vocab_size(&self) -> usize;

    /// One row of `vocab_size` log-probabilities per prefix (without sos).
    fn next_log_probs(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// The model's decoder over the encoder states of one utterance.
pub struct ModelScorer<'a, F: Float> {
    model: &'a Model<F>,
    memory: Tensor<F>,
    valid: Vec<bool>,
}

impl<'a, F: Float> ModelScorer<'a, F> {
    pub fn new(model: &'a Model<F>, memory: Tensor<F>, valid: Vec<bool>) -> Self {
        Self { model, memory, valid }
    }
}

impl<F: Float> AttentionScorer for ModelScorer<'_, F> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let sos = self.model.config.sos();
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(sos).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::inference();
        let params = self.model.params.bind(&mut tape);
        let mem = tape.leaf(&self.memory);
        let rows = self.memory.rows();
        let logits = self.model.decode(
            &mut tape,
            &params,
            &refs,
            mem,
            &vec![0..rows; refs.len()],
            &self.valid,
            &mut Dropout::off(),
        )?;
        let v = self.vocab_size();
        let values = tape.value(logits);
        let mut out = Vec::with_capacity(refs.len());
        let mut end = 0;
        for r in &refs {
            end += r.len();
            out.push(log_softmax_rows(&values[(end - 1) * v..end * v], v));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub attn_score: f64,
    pub ctc_score: f64,
    pub score: f64,
    ctc_state: Option<CtcPrefixState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub tokens: Vec<usize>,
    pub score: f64,
    /// No hypothesis ended within the length bound; `tokens` is the best
    /// partial one.
    pub truncated: bool,
}

/// Content ids are `1..eos`; the vocabulary ends with `[sos, eos]`.
#[derive(Debug, Clone, Copy)]
pub struct Symbols {
    pub blank: usize,
    pub sos: usize,
    pub eos: usize,
}

impl Symbols {
    pub fn for_vocab(v: usize) -> Self {
        Self {
            blank: 0,
            sos: v - 2,
            eos: v - 1,
        }
    }

    fn content(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.sos).filter(move |&k| k != self.blank)
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}

/// One-pass joint CTC/attention beam search.
pub fn joint_beam_search(
    scorer: &mut dyn AttentionScorer,
    ctc_logits: &[f64],
    cfg: &BeamConfig,
    sym: Symbols,
) -> Result<BeamResult> {
    cfg.validate()?;
    let v = scorer.vocab_size();
    let lambda = cfg.ctc_weight;
    let ctc = (lambda > 0.0).then(|| CtcPrefixScorer::new(ctc_logits, v, sym.blank));
    let frames = ctc_logits.len() / v.max(1);
    let max_len = cfg.max_output_len.unwrap_or(frames.max(1));
    let mut running = vec![Hypothesis {
        tokens: Vec::new(),
        attn_score: 0.0,
        ctc_score: 0.0,
        score: 0.0,
        ctc_state: ctc.as_ref().map(CtcPrefixScorer::initial),
    }];
    let mut ended: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut partial: Option<(f64, Vec<usize>)> = None;

    for step in 0..=max_len {
        if let Some(best) = running.iter().map(|h| (h.score, h.tokens.clone())).min_by(rank) {
            partial = Some(best);
        }
        let prefixes: Vec<&[usize]> = running.iter().map(|h| h.tokens.as_slice()).collect();
        let att = scorer.next_log_probs(&prefixes)?;
        // (score, tokens incl. eos marker, hypothesis) candidates
        let mut cands: Vec<((f64, Vec<usize>), Option<Hypothesis>)> = Vec::new();
        for (h, lp) in running.iter().zip(&att) {
            let ctc_final = match (&ctc, &h.ctc_state) {
                (Some(c), Some(s)) => c.final_score(s),
                _ => 0.0,
            };
            if ctc_final.is_finite() {
                let s = (1.0 - lambda) * (h.attn_score + lp[sym.eos]) + lambda * ctc_final
                    + cfg.length_penalty * h.tokens.len() as f64;
                if s.is_finite() {
                    let mut toks = h.tokens.clone();
                    toks.push(sym.eos);
                    cands.push(((s, toks), None));
                }
            }
            if step == max_len {
                continue;
            }
            for c in sym.content() {
                let attn_score = h.attn_score + lp[c];
                let (ctc_state, ctc_score) = match (&ctc, &h.ctc_state) {
                    (Some(sc), Some(st)) => {
                        let n = sc.extend(st, c);
                        let p = n.prefix_score;
                        (Some(n), p)
                    }
                    _ => (None, 0.0),
                };
                let score = (1.0 - lambda) * attn_score
                    + lambda * ctc_score
                    + cfg.length_penalty * (h.tokens.len() + 1) as f64;
                if !score.is_finite() {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                cands.push((
                    (score, tokens.clone()),
                    Some(Hypothesis {
                        tokens,
                        attn_score,
                        ctc_score,
                        score,
                        ctc_state,
                    }),
                ));
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0));
        cands.truncate(cfg.beam_size);
        running.clear();
        for (key, hyp) in cands {
            match hyp {
                Some(h) => running.push(h),
                None => ended.push((key.0, key.1[..key.1.len() - 1].to_vec())),
            }
        }
        if running.is_empty() {
            break;
        }
        // Scores never increase under extension when the length penalty is
        // non-positive, so a finished hypothesis at least as good as every
        // running one is final.
        if cfg.length_penalty <= 0.0 {
            let best_end = ended.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
            let best_run = running.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_end >= best_run {
                break;
            }
        }
    }
    ended.sort_by(rank);
    if let Some((score, tokens)) = ended.into_iter().next() {
        return Ok(BeamResult {
            tokens,
            score,
            truncated: false,
        });
    }
    let best = running
        .into_iter()
        .map(|h| (h.score, h.tokens))
        .min_by(rank)
        .or(partial)
        .unwrap_or((f64::NEG_INFINITY, Vec::new()));
    Ok(BeamResult {
        tokens: best.1,
        score: best.0,
        truncated: true,
    })
}

/// Greedy attention decoding: the highest-scoring next token each step.
pub fn greedy_attention_decode(scorer: &mut dyn AttentionScorer, max_len: usize, sym: Symbols) -> Result<Vec<usize>> {
    let mut tokens = Vec::new();
    for step in 0..=max_len {
        let lp = scorer.next_log_probs(&[&tokens])?.remove(0);
        let mut best = sym.eos;
        if step < max_len {
            for c in sym.content() {
                if lp[c] > lp[best] || (lp[c] == lp[best] && c < best) {
                    best = c;
                }
            }
        }
        if best == sym.eos {
            break;
        }
        tokens.push(best);
    }
    Ok(tokens)
}
