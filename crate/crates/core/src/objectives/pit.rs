use crate::error::{Error, Result};
use crate::grad::{Float, Tape, Var};
use crate::perm::permutations;

use super::types::DiarizationLabels;

pub const MAX_PIT_SPEAKERS: usize = 4;

/// `log(1 + e^x) − y·x`, stable for large `|x|`.
fn bce(x: f64, y: bool) -> f64 {
    x.max(0.0) - if y { x } else { 0.0 } + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitLoss {
    /// Mean BCE over `num_spk × T` entries under the best permutation.
    pub loss: f64,
    /// Output row `i` is matched with label row `perm[i]`.
    pub perm: Vec<usize>,
    /// Gradient with respect to the logits at the best permutation.
    pub grad: Vec<f64>,
}

/// Permutation-free BCE. `logit(i, t)` reads output `i` at frame `t`.
fn pit_core(s: usize, t: usize, logit: impl Fn(usize, usize) -> f64, labels: &DiarizationLabels) -> Result<PitLoss> {
    if labels.num_spk() != s || labels.frames() != t {
        return Err(Error::contract(format!(
            "pit_bce_loss: logits are {s}×{t}, labels are {}×{}",
            labels.num_spk(),
            labels.frames()
        )));
    }
    if s > MAX_PIT_SPEAKERS {
        return Err(Error::contract(format!(
            "pit_bce_loss: at most {MAX_PIT_SPEAKERS} speakers, got {s}"
        )));
    }
    if s == 0 || t == 0 {
        return Err(Error::contract("pit_bce_loss: empty logits"));
    }
    let mut cost = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            cost[i * s + j] = (0..t).map(|f| bce(logit(i, f), labels.activity[j][f])).sum();
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(s) {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * s + j]).sum();
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, p));
        }
    }
    let (c, perm) = best.expect("at least one permutation");
    let n = (s * t) as f64;
    Ok(PitLoss {
        loss: c / n,
        grad: Vec::new(),
        perm,
    })
}

/// PIT loss of `num_spk × T` logits.
pub fn pit_bce_loss<F: Float>(logits: &[F], num_spk: usize, labels: &DiarizationLabels) -> Result<PitLoss> {
    if num_spk == 0 || logits.len() % num_spk != 0 {
        return Err(Error::contract("pit_bce_loss: logits do not match num_spk"));
    }
    let t = logits.len() / num_spk;
    let mut r = pit_core(num_spk, t, |i, f| logits[i * t + f].as_f64(), labels)?;
    let n = logits.len() as f64;
    r.grad = (0..num_spk)
        .flat_map(|i| {
            let row = &labels.activity[r.perm[i]];
            (0..t).map(move |f| (sigmoid(logits[i * t + f].as_f64()) - if row[f] { 1.0 } else { 0.0 }) / n)
        })
        .collect();
    Ok(r)
}

/// PIT loss on rows `rows` of a frame-major `N × num_spk` logit node.
pub fn pit_bce_tape<F: Float>(
    tape: &mut Tape<F>,
    logits: Var,
    rows: &[usize],
    labels: &DiarizationLabels,
) -> Result<(Var, Vec<usize>)> {
    let x = tape.gather_rows(logits, rows)?;
    let s = tape.shape(x)[1];
    let t = rows.len();
    let vals = tape.value(x);
    let r = pit_core(s, t, |i, f| vals[f * s + i].as_f64(), labels)?;
    let n = (s * t) as f64;
    let mut grad = vec![F::zero(); s * t];
    for f in 0..t {
        for i in 0..s {
            let y = labels.activity[r.perm[i]][f];
            grad[f * s + i] = F::of((sigmoid(vals[f * s + i].as_f64()) - if y { 1.0 } else { 0.0 }) / n);
        }
    }
    let v = tape.custom_scalar(x, F::of(r.loss), grad)?;
    Ok((v, r.perm))
}
