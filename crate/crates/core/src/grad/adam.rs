use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Float, Tensor};

/// Inverse-square-root warmup schedule; reaches `peak_lr` at step `warmup`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoamSchedule {
    pub peak_lr: f64,
    pub warmup: u64,
}

impl NoamSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak_lr * w.sqrt() * (s.powf(-0.5)).min(s * w.powf(-1.5))
    }
}

/// Adam moments for a list of parameters, matched by position.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        Self::with_hyper(params, 0.9, 0.98, 1e-9)
    }

    pub fn with_hyper(params: &[Tensor<F>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
        }
    }

    /// One bias-corrected update of every parameter that requires grad and
    /// holds a gradient buffer. The step counter advances once per call.
    pub fn step(&mut self, params: &mut [Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} parameters but state for {}",
                params.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(t));
        let c2 = F::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (F::of(lr), F::of(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(<[F]>::to_vec) else { continue };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(params: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = F::of(max_norm / total);
        for p in params.iter_mut() {
            if p.grad().is_some() {
                p.grad_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    total
}
