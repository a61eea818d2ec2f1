use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::grad::{finite_diff_check, Tape, Tensor};
use crate::model::{Dropout, FeatureSequence, LayerSelection, Model, ModelConfig, Packed};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

// ---------------------------------------------------------------- CTC

/// Sums path probabilities over all `V^T` frame labelings that collapse to `target`.
fn ctc_brute_force(logits: &[f64], v: usize, target: &[usize]) -> f64 {
    let t = logits.len() / v;
    let lp = log_softmax_rows(logits, v);
    let mut total = 0.0;
    for code in 0..v.pow(t as u32) {
        let mut path = Vec::with_capacity(t);
        let mut c = code;
        for _ in 0..t {
            path.push(c % v);
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &k in &path {
            if k != prev && k != 0 {
                collapsed.push(k);
            }
            prev = k;
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(f, &k)| lp[f * v + k]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for k in 1..v {
                let mut q: Vec<usize> = p.clone();
                q.push(k);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn ctc_uniform_two_frames() {
    let r = ctc_loss(&[0.0f64; 4], 2, &[1], 0).unwrap();
    assert!((r.loss - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((r.loss - 0.28768).abs() < 1e-5);
}

#[test]
fn ctc_empty_target_is_all_blank() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = rand_vec(&mut rng, 15, 2.0);
    let lp = log_softmax_rows(&logits, 3);
    let expect: f64 = -(0..5).map(|t| lp[t * 3]).sum::<f64>();
    let r = ctc_loss(&logits, 3, &[], 0).unwrap();
    assert!((r.loss - expect).abs() < 1e-12);
}

#[test]
fn ctc_matches_enumeration_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in 2..=3 {
        for t in 1..=4 {
            for target in all_targets(v, 2) {
                let logits = rand_vec(&mut rng, t * v, 3.0);
                let r = ctc_loss(&logits, v, &target, 0).unwrap();
                let oracle = ctc_brute_force(&logits, v, &target);
                if oracle.is_infinite() {
                    assert!(!r.feasible && r.loss == f64::INFINITY, "{target:?} T={t}");
                } else {
                    assert!((r.loss - oracle).abs() < 1e-9, "{target:?} T={t}: {} vs {oracle}", r.loss);
                }
            }
        }
    }
}

#[test]
fn ctc_infeasible_is_infinite_not_nan() {
    let r = ctc_loss(&[0.0f64; 3], 3, &[1, 1], 0).unwrap();
    assert!(!r.feasible);
    assert_eq!(r.loss, f64::INFINITY);
    assert!(r.grad.iter().all(|g| *g == 0.0));
    assert!(ctc_loss(&[0.0f64; 9], 3, &[1, 1], 0).unwrap().feasible);
    assert!(ctc_loss(&[0.0f64; 6], 3, &[0], 0).is_err());
}

#[test]
fn ctc_rejects_blank_outside_vocabulary() {
    assert!(matches!(ctc_loss(&[0.0f64; 4], 2, &[1], 5), Err(Error::Bounds { index: 5, .. })));
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![6, 4], rand_vec(&mut rng, 24, 2.0)).unwrap().with_grad();
        let target = [1usize, 3, 3];
        let err = finite_diff_check(&[x], 1e-4, |tape, v| {
            let rows: Vec<usize> = (0..6).collect();
            Ok(ctc_loss_tape(tape, v[0], &rows, &target, 0)?.expect("feasible"))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

// ---------------------------------------------------------------- regularizer

/// Direct evaluation for one track, written independently of the library.
fn ti_oracle(track: &[Vec<f64>], mask: &[bool], lambda: f64) -> f64 {
    let d = track[0].len() as f64;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut s = 0.0;
    for t in 0..track.len() {
        for lag in [1, 5] {
            if t + lag < track.len() && mask[t] && mask[t + lag] {
                s += dist(&track[t + lag], &track[t]);
            }
        }
    }
    lambda * s / d.sqrt()
}

fn to_tensor(track: &[Vec<f64>]) -> Tensor<f64> {
    let d = track[0].len();
    Tensor::new(vec![track.len(), d], track.concat()).unwrap()
}

#[test]
fn ramp_hand_case() {
    let u = [0.5, 0.5, 0.5, 0.5];
    let track: Vec<Vec<f64>> = (0..6).map(|t| u.iter().map(|x| x * t as f64).collect()).collect();
    let l = time_invariant_loss(&[&to_tensor(&track)], 0.1, &[true; 6]).unwrap();
    assert!((l - 0.5).abs() < 1e-12);
}

#[test]
fn ti_matches_oracle_on_random_tracks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let t = rng.random_range(2..20);
        let d = rng.random_range(1..8);
        let track: Vec<Vec<f64>> = (0..t).map(|_| rand_vec(&mut rng, d, 2.0)).collect();
        let mut mask = vec![true; t];
        for m in mask.iter_mut().skip(t / 2) {
            *m = rng.random_bool(0.7);
        }
        let lambda = rng.random_range(0.0..1.0);
        let got = time_invariant_loss(&[&to_tensor(&track)], lambda, &mask).unwrap();
        assert!((got - ti_oracle(&track, &mask, lambda)).abs() < 1e-10);
    }
}

#[test]
fn ti_constant_and_zero_scale() {
    let track = to_tensor(&vec![vec![1.5, -2.0, 0.25]; 9]);
    assert_eq!(time_invariant_loss(&[&track], 0.1, &[true; 9]).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy: Vec<Vec<f64>> = (0..9).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
    assert_eq!(time_invariant_loss(&[&to_tensor(&noisy)], 0.0, &[true; 9]).unwrap(), 0.0);
    assert!(time_invariant_loss::<f64>(&[], 0.1, &[]).is_err());
}

#[test]
fn ti_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let track: Vec<Vec<f64>> = (0..12).map(|_| rand_vec(&mut rng, 2, 1.0)).collect();
    let th: f64 = 0.7;
    let rot: Vec<Vec<f64>> = track
        .iter()
        .map(|r| vec![th.cos() * r[0] - th.sin() * r[1], th.sin() * r[0] + th.cos() * r[1]])
        .collect();
    let a = time_invariant_loss(&[&to_tensor(&track)], 0.1, &[true; 12]).unwrap();
    let b = time_invariant_loss(&[&to_tensor(&rot)], 0.1, &[true; 12]).unwrap();
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn ti_tape_matches_pure_batch_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lens = [7usize, 11, 4];
    let d = 3;
    let layers: Vec<Vec<f64>> = (0..2).map(|_| rand_vec(&mut rng, lens.iter().sum::<usize>() * d, 1.0)).collect();
    let mut packed = Packed::from_lengths(&lens);
    packed.valid[17] = false;
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = layers
        .iter()
        .map(|l| tape.param(vec![l.len() / d, d], l.clone()).unwrap())
        .collect();
    let got = time_invariant_loss_tape(&mut tape, &vars, &packed, 0.1).unwrap();
    let mut want = Vec::new();
    let tensors: Vec<Tensor<f64>> = layers
        .iter()
        .map(|l| Tensor::new(vec![l.len() / d, d], l.clone()).unwrap())
        .collect();
    for seg in &packed.segments {
        let parts: Vec<Tensor<f64>> = tensors.iter().map(|t| t.slice_rows(seg.clone())).collect();
        want.push((parts, packed.valid[seg.clone()].to_vec()));
    }
    let refs: Vec<(Vec<&Tensor<f64>>, &[bool])> =
        want.iter().map(|(p, m)| (p.iter().collect(), m.as_slice())).collect();
    let pure = time_invariant_loss_batch(&refs, 0.1).unwrap();
    assert!((tape.item(got) - pure).abs() < 1e-12);
}

#[test]
fn ti_gradient() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![9, 4], rand_vec(&mut rng, 36, 1.0)).unwrap().with_grad();
        let packed = Packed::from_lengths(&[6, 3]);
        let err = finite_diff_check(&[x], 1e-4, |tape, v| time_invariant_loss_tape(tape, &[v[0]], &packed, 0.1)).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

// ---------------------------------------------------------------- CE

#[test]
fn ce_uniform_is_log_vocab() {
    for smoothing in [0.0, 0.1] {
        let (l, _) = attention_ce_loss(&[0.0f64; 8], 4, &[1, 3], smoothing).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn ce_saturated_and_smoothed() {
    let logits = [50.0, 0.0, 0.0, 0.0];
    let (l, _) = attention_ce_loss(&logits, 4, &[0], 0.0).unwrap();
    assert!(l < 1e-20);
    let (l, _) = attention_ce_loss(&logits, 4, &[0], 0.1).unwrap();
    // −Σ q log p with log p = (−z, −50 − z, …), z = log(1 + 3e^{−50})
    let z = (1.0 + 3.0 * (-50f64).exp()).ln();
    let expect = (1.0 - 0.1 + 0.025) * z + 3.0 * 0.025 * (50.0 + z);
    assert!((l - expect).abs() < 1e-12);
}

#[test]
fn ce_gradient() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![3, 5], rand_vec(&mut rng, 15, 2.0)).unwrap().with_grad();
        let err = finite_diff_check(&[x], 1e-4, |tape, v| attention_ce_tape(tape, v[0], &[4, 0, 2], 0.1)).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

// ---------------------------------------------------------------- total

#[test]
fn total_loss_composition() {
    let b = asr_total_loss(2.0, 1.0, 0.5, 0.3).unwrap();
    assert!((b.total - 1.8).abs() < 1e-12);
    let b = asr_total_loss(2.0, 1.0, 0.5, 1.0).unwrap();
    assert!((b.total - 2.5).abs() < 1e-12);
    assert!(asr_total_loss(1.0, 1.0, 0.0, 1.5).is_err());
}

// ---------------------------------------------------------------- PIT

fn random_labels(rng: &mut ChaCha8Rng, s: usize, t: usize) -> DiarizationLabels {
    DiarizationLabels::new((0..s).map(|_| (0..t).map(|_| rng.random_bool(0.5)).collect()).collect(), 0.01).unwrap()
}

#[test]
fn pit_is_permutation_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..100 {
        let s = 2 + k % 2;
        let t = rng.random_range(3..30);
        let logits = rand_vec(&mut rng, s * t, 4.0);
        let labels = random_labels(&mut rng, s, t);
        let base = pit_bce_loss(&logits, s, &labels).unwrap().loss;
        for p in crate::perm::permutations(s) {
            let l = pit_bce_loss(&logits, s, &labels.permuted(&p)).unwrap().loss;
            assert!((l - base).abs() < 1e-12);
        }
    }
}

#[test]
fn pit_single_speaker_zero_logits() {
    let labels = DiarizationLabels::new(vec![vec![true, false, true, true]], 0.01).unwrap();
    let r = pit_bce_loss(&[0.0f64; 4], 1, &labels).unwrap();
    assert!((r.loss - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn pit_finds_the_matching_permutation() {
    let labels = DiarizationLabels::new(
        vec![vec![true, true, false, false], vec![false, true, true, false], vec![false, false, false, true]],
        0.01,
    )
    .unwrap();
    // Output i reproduces label row order[i].
    let order = [2usize, 0, 1];
    let logits: Vec<f64> = order
        .iter()
        .flat_map(|&j| labels.activity[j].iter().map(|&a| if a { 40.0 } else { -40.0 }))
        .collect();
    let r = pit_bce_loss(&logits, 3, &labels).unwrap();
    assert!(r.loss < 1e-15);
    assert_eq!(r.perm, order);
    assert!(pit_bce_loss(&logits, 3, &DiarizationLabels::silent(2, 4, 0.01)).is_err());
}

#[test]
fn pit_gradient() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![7, 2], rand_vec(&mut rng, 14, 3.0)).unwrap().with_grad();
        let labels = random_labels(&mut rng, 2, 6);
        let rows: Vec<usize> = (1..7).collect();
        let err = finite_diff_check(&[x], 1e-4, |tape, v| Ok(pit_bce_tape(tape, v[0], &rows, &labels)?.0)).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

// ---------------------------------------------------------------- composite

fn small_model(lambda_s: f64, disentangled: LayerSelection) -> Model<f64> {
    Model::new(ModelConfig {
        d_feat: 5,
        d_model: 16,
        num_heads: 2,
        head_dim: 8,
        ff_inner: 24,
        enc_layers: 2,
        dec_layers: 1,
        disentangled,
        speaker_head: 2,
        vocab_size: 6,
        dropout_rate: 0.0,
        lambda_s,
        ..Default::default()
    })
    .unwrap()
}

fn batch(rng: &mut ChaCha8Rng) -> Vec<(FeatureSequence, Vec<usize>)> {
    [(9usize, vec![1usize, 2, 2]), (7, vec![3, 1])]
        .into_iter()
        .map(|(t, y)| {
            let f = FeatureSequence::new(Tensor::new(vec![t, 5], (0..t * 5).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
                .unwrap();
            (f, y)
        })
        .collect()
}

#[test]
fn composite_breakdown_is_consistent() {
    let m = small_model(0.1, LayerSelection::top());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = batch(&mut rng);
    let refs: Vec<(&FeatureSequence, &[usize])> = data.iter().map(|(f, y)| (f, y.as_slice())).collect();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape);
    let out = asr_objective(&m, &mut tape, &p, &refs, &AsrLossConfig::default(), &mut Dropout::off()).unwrap();
    let b = out.breakdown;
    assert!(b.l_s > 0.0 && b.l_ctc > 0.0 && b.l_attn > 0.0);
    assert!((b.total - (0.3 * b.l_ctc + 0.7 * b.l_attn + b.l_s)).abs() < 1e-12);
    assert!((tape.item(out.total) - b.total).abs() < 1e-12);
}

#[test]
fn zero_lambda_equals_plain_transformer_bitwise() {
    let a = small_model(0.0, LayerSelection::top());
    let b = small_model(0.0, LayerSelection::Named("none".into()));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = batch(&mut rng);
    let refs: Vec<(&FeatureSequence, &[usize])> = data.iter().map(|(f, y)| (f, y.as_slice())).collect();
    let run = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let out = asr_objective(m, &mut tape, &p, &refs, &AsrLossConfig::default(), &mut Dropout::off()).unwrap();
        let g = tape.backward(out.total).unwrap();
        let grads: Vec<Vec<f64>> = p.iter().map(|&v| g.wrt(&tape, v)).collect();
        (tape.item(out.total), grads)
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn composite_gradient() {
    let m = small_model(0.1, LayerSelection::top());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data = batch(&mut rng);
    let refs: Vec<(&FeatureSequence, &[usize])> = data.iter().map(|(f, y)| (f, y.as_slice())).collect();
    let names = ["enc.2.attn.q2", "enc.2.attn.v2", "enc.1.ff1.w", "ctc.w", "dec.1.cross.k1", "embed"];
    let ids: Vec<usize> = names.iter().map(|n| m.params.find(n).unwrap().0).collect();
    let tensors: Vec<Tensor<f64>> = ids.iter().map(|&i| m.params.tensors()[i].clone()).collect();
    let err = finite_diff_check(&tensors, 1e-4, |tape, vars| {
        let mut p = m.params.bind(tape);
        for (k, &i) in ids.iter().enumerate() {
            p[i] = vars[k];
        }
        Ok(asr_objective(&m, tape, &p, &refs, &AsrLossConfig::default(), &mut Dropout::off())?.total)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
