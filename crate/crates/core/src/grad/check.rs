use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Compares reverse-mode gradients against central differences.
///
/// `build` records a scalar loss given one leaf per entry of `params`. The
/// return value is `max |analytic − numeric| / max(1e-8, |numeric|)` over all
/// coordinates of all parameters.
pub fn finite_diff_check<B>(params: &[Tensor<f64>], h: f64, mut build: B) -> Result<f64>
where
    B: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(true);
            tape.leaf(&p)
        })
        .collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let mut eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p)).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.item(l))
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..work.len() {
        for ci in 0..work[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[pi][ci] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
