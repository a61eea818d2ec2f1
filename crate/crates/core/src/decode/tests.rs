use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{FeatureSequence, Model, ModelConfig};
use crate::objectives::log_softmax_rows;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

#[test]
fn greedy_examples() {
    let onehot = |path: &[usize], v: usize| -> Vec<f64> {
        path.iter()
            .flat_map(|&k| (0..v).map(move |j| if j == k { 5.0 } else { 0.0 }))
            .collect()
    };
    assert_eq!(ctc_greedy_decode(&onehot(&[1, 1, 0, 2], 3), 3, 0), vec![1, 2]);
    assert_eq!(ctc_greedy_decode(&onehot(&[0, 0, 0], 3), 3, 0), Vec::<usize>::new());
    assert_eq!(ctc_greedy_decode(&onehot(&[1, 0, 1], 3), 3, 0), vec![1, 1]);
}

/// All label sequences of length `t` over `v` symbols.
fn paths(t: usize, v: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..v.pow(t as u32)).map(move |mut code| {
        (0..t)
            .map(|_| {
                let k = code % v;
                code /= v;
                k
            })
            .collect()
    })
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &k in path {
        if k != prev && k != 0 {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// `(log P(output starts with g), log P(output == g))` by path enumeration.
fn brute_prefix(logits: &[f64], v: usize, g: &[usize]) -> (f64, f64) {
    let t = logits.len() / v;
    let lp = log_softmax_rows(logits, v);
    let (mut pre, mut full) = (0.0, 0.0);
    for p in paths(t, v) {
        let out = collapse(&p);
        let prob = p.iter().enumerate().map(|(f, &k)| lp[f * v + k]).sum::<f64>().exp();
        if out.starts_with(g) {
            pre += prob;
        }
        if out == g {
            full += prob;
        }
    }
    (pre.ln(), full.ln())
}

#[test]
fn prefix_scores_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 1..=6 {
        for _ in 0..4 {
            let v = 3;
            let logits = rand_vec(&mut rng, t * v, 2.0);
            let sc = CtcPrefixScorer::new(&logits, v, 0);
            let len = rng.random_range(0..=3);
            let g: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
            let st = sc.state_of(&g);
            let (pre, full) = brute_prefix(&logits, v, &g);
            let close = |a: f64, b: f64| (a == b) || (a - b).abs() < 1e-10;
            assert!(close(st.prefix_score, pre), "T={t} g={g:?}: {} vs {pre}", st.prefix_score);
            assert!(close(sc.final_score(&st), full), "T={t} g={g:?}");
        }
    }
}

#[test]
fn empty_prefix_state_is_blank_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = rand_vec(&mut rng, 12, 2.0);
    let lp = log_softmax_rows(&logits, 3);
    let s = CtcPrefixScorer::new(&logits, 3, 0).initial();
    let mut acc = 0.0;
    for t in 0..4 {
        acc += lp[t * 3];
        assert!((s.r_b[t] - acc).abs() < 1e-12);
    }
    assert_eq!(s.prefix_score, 0.0);
}

#[test]
fn prefix_score_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let logits = rand_vec(&mut rng, 8 * 4, 3.0);
        let sc = CtcPrefixScorer::new(&logits, 4, 0);
        let mut st = sc.initial();
        for _ in 0..5 {
            let c = rng.random_range(1..4);
            let next = sc.extend(&st, c);
            assert!(next.prefix_score <= st.prefix_score + 1e-12);
            assert!(sc.final_score(&next) <= next.prefix_score + 1e-12);
            st = next;
        }
    }
}

/// Attention log-probabilities drawn from a generator seeded by the prefix.
struct TableScorer {
    v: usize,
    seed: u64,
}

impl AttentionScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.v
    }

    fn next_log_probs(&mut self, prefixes: &[&[usize]]) -> crate::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

impl TableScorer {
    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..self.v).map(|_| rng.random_range(-2.0..2.0)).collect();
        log_softmax_rows(&logits, self.v)
    }
}

fn exhaustive(scorer: &TableScorer, ctc_logits: &[f64], lambda: f64, max_len: usize) -> Vec<usize> {
    let v = scorer.v;
    let sym = Symbols::for_vocab(v);
    let mut all: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for c in 1..sym.sos {
                let mut q: Vec<usize> = p.clone();
                q.push(c);
                next.push(q);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for g in all {
        let mut att = 0.0;
        for i in 0..=g.len() {
            let next = if i < g.len() { g[i] } else { sym.eos };
            att += scorer.row(&g[..i])[next];
        }
        let ctc = if lambda > 0.0 { brute_prefix(ctc_logits, v, &g).1 } else { 0.0 };
        let s = (1.0 - lambda) * att + lambda * ctc;
        if !s.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((b, bg)) => s > *b || (s == *b && g < *bg),
        };
        if better {
            best = Some((s, g));
        }
    }
    best.unwrap().1
}

#[test]
fn exhaustive_beam_equals_brute_force() {
    // Three content tokens: blank, 1, 2, 3, sos, eos.
    let v = 6;
    for lambda in [0.0, 0.3, 1.0] {
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let t = 4;
            let ctc_logits = rand_vec(&mut rng, t * v, 2.5);
            let mut scorer = TableScorer { v, seed };
            let cfg = BeamConfig {
                beam_size: 200,
                ctc_weight: lambda,
                max_output_len: Some(3),
                length_penalty: 0.0,
            };
            let got = joint_beam_search(&mut scorer, &ctc_logits, &cfg, Symbols::for_vocab(v)).unwrap();
            let want = exhaustive(&scorer, &ctc_logits, lambda, 3);
            assert!(!got.truncated);
            assert_eq!(got.tokens, want, "lambda {lambda} seed {seed}");
        }
    }
}

#[test]
fn unit_beam_without_ctc_is_greedy() {
    let v = 7;
    for seed in 0..10u64 {
        let cfg = BeamConfig {
            beam_size: 1,
            ctc_weight: 0.0,
            max_output_len: Some(6),
            length_penalty: 0.0,
        };
        let mut a = TableScorer { v, seed };
        let got = joint_beam_search(&mut a, &[0.0; 7], &cfg, Symbols::for_vocab(v)).unwrap();
        let mut b = TableScorer { v, seed };
        let greedy = greedy_attention_decode(&mut b, 6, Symbols::for_vocab(v)).unwrap();
        assert_eq!(got.tokens, greedy);
    }
}

/// Never allows eos.
struct NoEnd;

impl AttentionScorer for NoEnd {
    fn vocab_size(&self) -> usize {
        5
    }

    fn next_log_probs(&mut self, prefixes: &[&[usize]]) -> crate::Result<Vec<Vec<f64>>> {
        let row = vec![f64::NEG_INFINITY, (0.6f64).ln(), (0.3f64).ln(), (0.1f64).ln(), f64::NEG_INFINITY];
        Ok(vec![row; prefixes.len()])
    }
}

#[test]
fn unreachable_eos_reports_truncation() {
    let cfg = BeamConfig {
        beam_size: 3,
        ctc_weight: 0.0,
        max_output_len: Some(3),
        length_penalty: 0.0,
    };
    let r = joint_beam_search(&mut NoEnd, &[0.0; 5], &cfg, Symbols::for_vocab(5)).unwrap();
    assert!(r.truncated);
    assert_eq!(r.tokens, vec![1, 1, 1]);
}

#[test]
fn recognize_is_deterministic() {
    let c = ModelConfig {
        d_feat: 4,
        d_model: 8,
        num_heads: 2,
        head_dim: 4,
        ff_inner: 8,
        enc_layers: 1,
        dec_layers: 1,
        speaker_head: 2,
        vocab_size: 6,
        ..Default::default()
    };
    let m = Model::<f32>::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = FeatureSequence::new(
        crate::grad::Tensor::new(vec![10, 4], (0..40).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap(),
    )
    .unwrap();
    let cfg = BeamConfig {
        max_output_len: Some(5),
        ..Default::default()
    };
    let a = recognize(&m, &f, &cfg).unwrap();
    let b = recognize(&m, &f, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.len() <= 5);
}
