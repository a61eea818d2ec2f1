use crate::error::{Error, Result};
use crate::grad::{Float, Tape, Var};

/// Negative log-likelihood and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcLoss {
    /// `+∞` when the target cannot be aligned in the available frames.
    pub loss: f64,
    pub feasible: bool,
    /// `T × V`, `softmax − occupancy`; zeros when infeasible.
    pub grad: Vec<f64>,
}

pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax of a `T × V` matrix.
pub fn log_softmax_rows<F: Float>(logits: &[F], v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(v) {
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x.as_f64() - z));
    }
    out
}

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of repeated labels.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC over a `T × V` logit matrix with the blank-interleaved state lattice
/// `(blank, y1, blank, y2, …, blank)`, forward/backward in log space.
pub fn ctc_loss<F: Float>(logits: &[F], v: usize, target: &[usize], blank: usize) -> Result<CtcLoss> {
    if v == 0 || logits.len() % v != 0 {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: vec![logits.len()],
            rhs: vec![v],
        });
    }
    if blank >= v {
        return Err(Error::Bounds {
            op: "ctc_loss",
            index: blank,
            extent: v,
        });
    }
    if let Some(&bad) = target.iter().find(|&&y| y == blank || y >= v) {
        return Err(Error::Input(format!("ctc target contains invalid id {bad}")));
    }
    let t_len = logits.len() / v;
    if t_len < min_frames(target) || t_len == 0 {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            feasible: false,
            grad: vec![0.0; logits.len()],
        });
    }
    let lp = log_softmax_rows(logits, v);
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let skip = |s: usize| s % 2 == 1 && s >= 3 && target[s / 2] != target[s / 2 - 1];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[label(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp[t * v + label(s)] };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 { lse2(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if log_p == ninf {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            feasible: false,
            grad: vec![0.0; logits.len()],
        });
    }

    // beta[t][s]: log probability of the remaining frames t+1.. given state s at t.
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp[(t + 1) * v + label(s2)];
            let mut b = next(s);
            if s + 1 < s_len {
                b = lse2(b, next(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = lse2(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; logits.len()];
    let mut occ = vec![ninf; v];
    for t in 0..t_len {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let k = label(s);
            occ[k] = lse2(occ[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..v {
            grad[t * v + k] = lp[t * v + k].exp() - (occ[k] - log_p).exp();
        }
    }
    Ok(CtcLoss {
        loss: -log_p,
        feasible: true,
        grad,
    })
}

/// CTC on the rows `rows` of a `N × V` logit node. `None` when infeasible.
pub fn ctc_loss_tape<F: Float>(
    tape: &mut Tape<F>,
    logits: Var,
    rows: &[usize],
    target: &[usize],
    blank: usize,
) -> Result<Option<Var>> {
    let x = tape.gather_rows(logits, rows)?;
    let v = tape.shape(x)[1];
    let r = ctc_loss(tape.value(x), v, target, blank)?;
    if !r.feasible {
        return Ok(None);
    }
    let grad = r.grad.into_iter().map(F::of).collect();
    Ok(Some(tape.custom_scalar(x, F::of(r.loss), grad)?))
}
