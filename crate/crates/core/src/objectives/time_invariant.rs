use crate::error::{Error, Result};
use crate::grad::{Float, Tape, Tensor, Var};
use crate::model::Packed;

/// Frame lags penalized by the regularizer.
pub const LAGS: [usize; 2] = [1, 5];

/// Index pairs `(t, t + lag)` with both ends valid.
fn pairs(valid: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for lag in LAGS {
        for t in 0..valid.len().saturating_sub(lag) {
            if valid[t] && valid[t + lag] {
                out.push((t, t + lag));
            }
        }
    }
    out
}

/// Regularizer for one utterance:
/// `λ/L · Σ_l 1/√d · Σ_t (‖s_{t+1} − s_t‖ + ‖s_{t+5} − s_t‖)`.
pub fn time_invariant_loss<F: Float>(tracks: &[&Tensor<F>], lambda_s: f64, pad_mask: &[bool]) -> Result<f64> {
    if tracks.is_empty() {
        return Err(Error::contract("time_invariant_loss: no speaker tracks"));
    }
    let mut acc = 0.0;
    for s in tracks {
        if s.rank() != 2 || s.rows() != pad_mask.len() {
            return Err(Error::Shape {
                op: "time_invariant_loss",
                lhs: s.shape().to_vec(),
                rhs: vec![pad_mask.len()],
            });
        }
        if s.rows() < 2 {
            return Err(Error::contract("time_invariant_loss: track shorter than 2 frames"));
        }
        let d = s.cols();
        let mut sum = 0.0;
        for (a, b) in pairs(pad_mask) {
            let n: f64 = s
                .row(a)
                .iter()
                .zip(s.row(b))
                .map(|(x, y)| (y.as_f64() - x.as_f64()).powi(2))
                .sum();
            sum += n.sqrt();
        }
        acc += sum / (d as f64).sqrt();
    }
    Ok(lambda_s * acc / tracks.len() as f64)
}

/// Batch mean of [`time_invariant_loss`] over utterances.
pub fn time_invariant_loss_batch<F: Float>(utterances: &[(Vec<&Tensor<F>>, &[bool])], lambda_s: f64) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::contract("time_invariant_loss: empty batch"));
    }
    let mut total = 0.0;
    for (tracks, mask) in utterances {
        total += time_invariant_loss(tracks, lambda_s, mask)?;
    }
    Ok(total / utterances.len() as f64)
}

/// Tape form over packed tracks (`rows × d_s` each); pairs never cross
/// segment boundaries. Batch mean over segments.
pub fn time_invariant_loss_tape<F: Float>(
    tape: &mut Tape<F>,
    tracks: &[Var],
    packed: &Packed,
    lambda_s: f64,
) -> Result<Var> {
    if tracks.is_empty() {
        return Err(Error::contract("time_invariant_loss: no speaker tracks"));
    }
    if packed.is_empty() {
        return Err(Error::contract("time_invariant_loss: empty batch"));
    }
    let mut from = Vec::new();
    let mut to = Vec::new();
    for seg in &packed.segments {
        if seg.len() < 2 {
            return Err(Error::contract("time_invariant_loss: track shorter than 2 frames"));
        }
        for (a, b) in pairs(&packed.valid[seg.clone()]) {
            from.push(seg.start + a);
            to.push(seg.start + b);
        }
    }
    let mut sums = Vec::with_capacity(tracks.len());
    for &s in tracks {
        let d = tape.shape(s)[1];
        let a = tape.gather_rows(s, &from)?;
        let b = tape.gather_rows(s, &to)?;
        let diff = tape.sub(b, a)?;
        let norms = tape.row_norm(diff)?;
        let total = tape.sum(norms);
        sums.push(tape.scale(total, F::of(1.0 / (d as f64).sqrt())));
    }
    let all = tape.add_n(&sums)?;
    let scale = lambda_s / (tracks.len() * packed.len()) as f64;
    Ok(tape.scale(all, F::of(scale)))
}
