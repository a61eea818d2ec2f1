use crate::grad::Float;
use crate::objectives::{log_softmax_rows, lse2};

/// Frame-wise argmax, repeats collapsed, blanks dropped.
pub fn ctc_greedy_decode<F: Float>(logits: &[F], v: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.chunks(v) {
        let mut best = 0;
        for (k, x) in row.iter().enumerate() {
            if *x > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Forward variables of a prefix `g`: `r_n[t]` / `r_b[t]` are the log
/// probabilities that frames `0..=t` collapse to `g` ending in a label /
/// in blank.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    pub r_n: Vec<f64>,
    pub r_b: Vec<f64>,
    pub last: Option<usize>,
    /// `log P(output starts with g)`.
    pub prefix_score: f64,
}

/// Incremental CTC prefix probabilities over fixed frame posteriors.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer {
    lp: Vec<f64>,
    frames: usize,
    v: usize,
    blank: usize,
}

impl CtcPrefixScorer {
    pub fn new<F: Float>(logits: &[F], v: usize, blank: usize) -> Self {
        Self {
            lp: log_softmax_rows(logits, v),
            frames: logits.len() / v,
            v,
            blank,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.lp[t * self.v + k]
    }

    pub fn initial(&self) -> CtcPrefixState {
        let mut r_b = Vec::with_capacity(self.frames);
        let mut acc = 0.0;
        for t in 0..self.frames {
            acc += self.lp(t, self.blank);
            r_b.push(acc);
        }
        CtcPrefixState {
            r_n: vec![f64::NEG_INFINITY; self.frames],
            r_b,
            last: None,
            prefix_score: 0.0,
        }
    }

    /// State of `g·c` from the state of `g`.
    pub fn extend(&self, g: &CtcPrefixState, c: usize) -> CtcPrefixState {
        let n = self.frames;
        let ninf = f64::NEG_INFINITY;
        let mut r_n = vec![ninf; n];
        let mut r_b = vec![ninf; n];
        if n == 0 {
            return CtcPrefixState {
                r_n,
                r_b,
                last: Some(c),
                prefix_score: ninf,
            };
        }
        // phi[t]: log prob that frames 0..=t give g and a fresh c may start at t + 1.
        let phi = |t: usize| if g.last == Some(c) { g.r_b[t] } else { lse2(g.r_n[t], g.r_b[t]) };
        let mut psi = ninf;
        if g.last.is_none() {
            r_n[0] = self.lp(0, c);
            psi = r_n[0];
        }
        for t in 1..n {
            let start = phi(t - 1) + self.lp(t, c);
            r_n[t] = lse2(r_n[t - 1] + self.lp(t, c), start);
            r_b[t] = lse2(r_n[t - 1], r_b[t - 1]) + self.lp(t, self.blank);
            psi = lse2(psi, start);
        }
        CtcPrefixState {
            r_n,
            r_b,
            last: Some(c),
            prefix_score: psi,
        }
    }

    /// `log P(output == g)`.
    pub fn final_score(&self, g: &CtcPrefixState) -> f64 {
        match self.frames {
            0 => {
                if g.last.is_none() {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            n => lse2(g.r_n[n - 1], g.r_b[n - 1]),
        }
    }

    /// Runs [`extend`](Self::extend) over a whole prefix.
    pub fn state_of(&self, prefix: &[usize]) -> CtcPrefixState {
        prefix.iter().fold(self.initial(), |s, &c| self.extend(&s, c))
    }
}
