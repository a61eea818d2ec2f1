use crate::error::{Error, Result};
use crate::grad::{Float, Tape, Var};

use super::ctc::log_softmax_rows;

pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Mean over rows of `−Σ_k q_k log p_k` with
/// `q = (1 − ε)·onehot(target) + ε/V`. Returns the loss and its gradient.
pub fn attention_ce_loss<F: Float>(logits: &[F], v: usize, targets: &[usize], smoothing: f64) -> Result<(f64, Vec<f64>)> {
    if v == 0 || logits.len() != targets.len() * v {
        return Err(Error::Shape {
            op: "attention_ce_loss",
            lhs: vec![logits.len() / v.max(1), v],
            rhs: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Input(format!("target id {bad} outside vocabulary of size {v}")));
    }
    if targets.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let lp = log_softmax_rows(logits, v);
    let n = targets.len() as f64;
    let off = smoothing / v as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(lp.len());
    for (row, &y) in lp.chunks(v).zip(targets) {
        for (k, &l) in row.iter().enumerate() {
            let q = off + if k == y { 1.0 - smoothing } else { 0.0 };
            loss -= q * l;
            grad.push((l.exp() - q) / n);
        }
    }
    Ok((loss / n, grad))
}

pub fn attention_ce_tape<F: Float>(tape: &mut Tape<F>, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let v = tape.shape(logits)[1];
    let (loss, grad) = attention_ce_loss(tape.value(logits), v, targets, smoothing)?;
    tape.custom_scalar(logits, F::of(loss), grad.into_iter().map(F::of).collect())
}
