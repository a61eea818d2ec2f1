use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, ModelConfig};
use super::features::{positional_encoding, FeatureNorm, FeatureSequence};
use super::params::{ones, xavier, zeros, ParamId, ParamStore, BUFFER_PREFIX};
use crate::error::{Error, Result};
use crate::grad::{AttentionLayout, Float, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Several sequences stacked along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    pub segments: Vec<Range<usize>>,
    /// One flag per packed row; `false` marks padding.
    pub valid: Vec<bool>,
}

impl Packed {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &l in lengths {
            segments.push(start..start + l);
            start += l;
        }
        Self {
            segments,
            valid: vec![true; start],
        }
    }

    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Packed row indices of the valid frames of sequence `i`.
    pub fn valid_rows(&self, i: usize) -> Vec<usize> {
        self.segments[i].clone().filter(|&r| self.valid[r]).collect()
    }

    fn mask(&self) -> Option<Vec<bool>> {
        (!self.valid.iter().all(|&v| v)).then(|| self.valid.clone())
    }

    pub fn self_layout(&self, causal: bool) -> Arc<AttentionLayout> {
        Arc::new(AttentionLayout {
            q_segments: self.segments.clone(),
            kv_segments: self.segments.clone(),
            key_valid: self.mask(),
            causal,
        })
    }
}

/// Inverted dropout with its own generator. `Dropout::off()` is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn off() -> Self {
        Self::new(0.0, 0)
    }

    pub fn apply<F: Float>(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 || !tape.is_recording() {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - self.rate));
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < self.rate { F::zero() } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Mha {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    out: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    attn: Mha,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Mha,
    ln2: Norm,
    cross: Mha,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Tape-level encoder result for a packed batch.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Final (normed) states, `rows × d_model`.
    pub states: Var,
    /// `head_tracks[l][n]`: pre-projection output of head `n` in layer `l`
    /// (0-based here), `rows × head_dim`.
    pub head_tracks: Vec<Vec<Var>>,
    pub packed: Packed,
}

/// Materialized encoder result for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub states: Tensor<F>,
    pub head_tracks: Vec<Vec<Tensor<F>>>,
    /// 1-based disentangled layers.
    pub speaker_layers: Vec<usize>,
    /// 1-based.
    pub speaker_head: usize,
    pub valid: Vec<bool>,
}

impl<F: Float> EncoderOutput<F> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recorded track of `head` in `layer`, both 1-based.
    pub fn head_embeddings(&self, layer: usize, head: usize) -> Result<&Tensor<F>> {
        let heads = layer
            .checked_sub(1)
            .and_then(|l| self.head_tracks.get(l))
            .ok_or(Error::Bounds {
                op: "head_embeddings",
                index: layer,
                extent: self.head_tracks.len(),
            })?;
        head.checked_sub(1).and_then(|n| heads.get(n)).ok_or(Error::Bounds {
            op: "head_embeddings",
            index: head,
            extent: heads.len(),
        })
    }

    pub fn speaker_tracks(&self) -> Vec<&Tensor<F>> {
        self.speaker_layers
            .iter()
            .map(|&l| &self.head_tracks[l - 1][self.speaker_head - 1])
            .collect()
    }
}

/// Encoder/decoder transformer with CTC and attention heads and an optional
/// per-frame speaker activity head.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    cmvn_mean: ParamId,
    cmvn_istd: ParamId,
    frontend: Linear,
    enc: Vec<EncoderLayer>,
    enc_norm: Norm,
    ctc: Linear,
    embed: ParamId,
    dec: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
    diar: Option<Linear>,
}

struct Builder<'a, F: Float> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Float> Builder<'_, F> {
    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Linear {
        Linear {
            w: self.store.add(format!("{name}.w"), xavier(&mut self.rng, out, inp)),
            b: self.store.add(format!("{name}.b"), zeros(out)),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.g"), ones(d)),
            b: self.store.add(format!("{name}.b"), zeros(d)),
        }
    }

    fn mha(&mut self, name: &str, c: &ModelConfig) -> Mha {
        let mut proj = |kind: &str| -> Vec<ParamId> {
            (1..=c.num_heads)
                .map(|n| {
                    let t = xavier(&mut self.rng, c.head_dim, c.d_model);
                    self.store.add(format!("{name}.{kind}{n}"), t)
                })
                .collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let out = self.linear(&format!("{name}.out"), c.d_model, c.num_heads * c.head_dim);
        Mha { q, k, v, out }
    }
}

impl<F: Float> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::default();
        let cmvn_mean = store.add(format!("{BUFFER_PREFIX}cmvn_mean"), Tensor::zeros(&[c.d_feat]));
        let cmvn_istd = store.add(
            format!("{BUFFER_PREFIX}cmvn_istd"),
            Tensor::full(&[c.d_feat], F::one()),
        );
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(c.init_seed),
        };
        let frontend = b.linear("frontend", c.d_model, c.d_feat);
        let enc = (1..=c.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    ln1: b.norm(&format!("{p}.ln1"), c.d_model),
                    attn: b.mha(&format!("{p}.attn"), c),
                    ln2: b.norm(&format!("{p}.ln2"), c.d_model),
                    ff1: b.linear(&format!("{p}.ff1"), c.ff_inner, c.d_model),
                    ff2: b.linear(&format!("{p}.ff2"), c.d_model, c.ff_inner),
                }
            })
            .collect();
        let enc_norm = b.norm("enc_norm", c.d_model);
        let ctc = b.linear("ctc", c.vocab_size, c.d_model);
        let embed = {
            let t = xavier(&mut b.rng, c.vocab_size, c.d_model);
            b.store.add("embed", t)
        };
        let dec = (1..=c.dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayer {
                    ln1: b.norm(&format!("{p}.ln1"), c.d_model),
                    self_attn: b.mha(&format!("{p}.self"), c),
                    ln2: b.norm(&format!("{p}.ln2"), c.d_model),
                    cross: b.mha(&format!("{p}.cross"), c),
                    ln3: b.norm(&format!("{p}.ln3"), c.d_model),
                    ff1: b.linear(&format!("{p}.ff1"), c.ff_inner, c.d_model),
                    ff2: b.linear(&format!("{p}.ff2"), c.d_model, c.ff_inner),
                }
            })
            .collect();
        let dec_norm = b.norm("dec_norm", c.d_model);
        let out = b.linear("out", c.vocab_size, c.d_model);
        Ok(Self {
            config,
            params: store,
            cmvn_mean,
            cmvn_istd,
            frontend,
            enc,
            enc_norm,
            ctc,
            embed,
            dec,
            dec_norm,
            out,
            diar: None,
        })
    }

    /// Adds the per-frame speaker activity head (`num_spk × head_dim`).
    pub fn add_diar_head(&mut self, num_spk: usize, seed: u64) {
        if self.diar.is_some() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.params.add("diar.w", xavier(&mut rng, num_spk, self.config.head_dim));
        let b = self.params.add("diar.b", zeros(num_spk));
        self.diar = Some(Linear { w, b });
    }

    pub fn has_diar_head(&self) -> bool {
        self.diar.is_some()
    }

    pub fn num_speakers(&self) -> Option<usize> {
        self.diar.map(|d| self.params.get(d.b).numel())
    }

    pub fn feature_norm(&self) -> FeatureNorm {
        let f = |id| self.params.get(id).data().iter().map(|v: &F| v.as_f64() as f32).collect();
        FeatureNorm {
            mean: f(self.cmvn_mean),
            inv_std: f(self.cmvn_istd),
        }
    }

    pub fn set_feature_norm(&mut self, norm: &FeatureNorm) -> Result<()> {
        if norm.mean.len() != self.config.d_feat {
            return Err(Error::Shape {
                op: "set_feature_norm",
                lhs: vec![norm.mean.len()],
                rhs: vec![self.config.d_feat],
            });
        }
        let cast = |v: &[f32]| v.iter().map(|&x| F::of(x as f64)).collect::<Vec<_>>();
        self.params.get_mut(self.cmvn_mean).data_mut().copy_from_slice(&cast(&norm.mean));
        self.params.get_mut(self.cmvn_istd).data_mut().copy_from_slice(&cast(&norm.inv_std));
        Ok(())
    }

    /// Parameter-name prefix of encoder layer `l` (1-based).
    pub fn layer_prefix(l: usize) -> String {
        format!("enc.{l}.")
    }

    // --------------------------------------------------------------- input

    /// Normalized, optionally pooled frames of all sequences stacked along rows.
    pub fn pack_inputs(&self, seqs: &[&FeatureSequence]) -> Result<(Vec<F>, Packed)> {
        let d = self.config.d_feat;
        let norm = self.feature_norm();
        let stride = self.config.stride();
        let mut data = Vec::new();
        let mut valid = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.dim() != d {
                return Err(Error::Shape {
                    op: "encoder_forward",
                    lhs: vec![s.len(), s.dim()],
                    rhs: vec![s.len(), d],
                });
            }
            if s.valid_len() == 0 {
                return Err(Error::Input("sequence has no valid frames".into()));
            }
            let mut x: Vec<F> = Vec::with_capacity(s.len() * d);
            norm.apply(&s.frames, &mut x);
            let start = valid.len();
            if stride == 1 {
                data.extend_from_slice(&x);
                valid.extend_from_slice(&s.pad_mask);
            } else {
                for t0 in (0..s.len()).step_by(stride) {
                    let members: Vec<usize> = (t0..(t0 + stride).min(s.len())).filter(|&t| s.pad_mask[t]).collect();
                    let ok = s.pad_mask[t0];
                    let mut row = vec![F::zero(); d];
                    for &t in &members {
                        for j in 0..d {
                            row[j] += x[t * d + j];
                        }
                    }
                    if ok {
                        let n = F::of(members.len() as f64);
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                    data.extend(row);
                    valid.push(ok);
                }
            }
            let len = valid.len() - start;
            if len > self.config.max_len {
                return Err(Error::Input(format!(
                    "sequence length {len} exceeds max_len {}",
                    self.config.max_len
                )));
            }
            segments.push(start..valid.len());
        }
        Ok((data, Packed { segments, valid }))
    }

    fn positions(&self, packed: &Packed) -> Result<Vec<F>> {
        let longest = packed.segments.iter().map(|s| s.len()).max().unwrap_or(0);
        let pe = positional_encoding::<F>(longest, self.config.d_model, self.config.max_len)?;
        let mut out = Vec::with_capacity(packed.rows() * self.config.d_model);
        for s in &packed.segments {
            out.extend_from_slice(&pe.data()[..s.len() * self.config.d_model]);
        }
        Ok(out)
    }

    // ------------------------------------------------------------- pieces

    fn linear(&self, tape: &mut Tape<F>, p: &[Var], l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, p[l.w.0])?;
        tape.add_row(y, p[l.b.0])
    }

    fn norm(&self, tape: &mut Tape<F>, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[n.g.0], p[n.b.0], F::of(LN_EPS))
    }

    fn activation(&self, tape: &mut Tape<F>, x: Var) -> Var {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }

    fn feed_forward(&self, tape: &mut Tape<F>, p: &[Var], l1: Linear, l2: Linear, x: Var) -> Result<Var> {
        let h = self.linear(tape, p, l1, x)?;
        let h = self.activation(tape, h);
        self.linear(tape, p, l2, h)
    }

    fn mha(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        m: &Mha,
        xq: Var,
        xkv: Var,
        layout: &Arc<AttentionLayout>,
    ) -> Result<(Var, Vec<Var>)> {
        let scale = F::of(1.0 / (self.config.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(m.q.len());
        for n in 0..m.q.len() {
            let q = tape.matmul_nt(xq, p[m.q[n].0])?;
            let k = tape.matmul_nt(xkv, p[m.k[n].0])?;
            let v = tape.matmul_nt(xkv, p[m.v[n].0])?;
            heads.push(tape.attention(q, k, v, layout.clone(), scale)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        Ok((self.linear(tape, p, m.out, cat)?, heads))
    }

    fn check_finite(&self, tape: &Tape<F>, x: Var, what: &str) -> Result<()> {
        if tape.value(x).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite activations in {what}")))
        }
    }

    /// Self-attention block of encoder layer `l` (1-based) applied to `x`:
    /// the projected output and each head's output.
    pub fn multi_head_self_attention(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        l: usize,
        x: Var,
        layout: &Arc<AttentionLayout>,
    ) -> Result<(Var, Vec<Var>)> {
        let layer = self.enc.get(l.wrapping_sub(1)).ok_or(Error::Bounds {
            op: "multi_head_self_attention",
            index: l,
            extent: self.enc.len(),
        })?;
        self.mha(tape, p, &layer.attn, x, x, layout)
    }

    // ------------------------------------------------------------- encoder

    /// Frontend projection plus positional encoding of packed input rows.
    pub fn embed_inputs(&self, tape: &mut Tape<F>, p: &[Var], data: Vec<F>, packed: &Packed) -> Result<Var> {
        let x = tape.constant(vec![packed.rows(), self.config.d_feat], data)?;
        let h = self.linear(tape, p, self.frontend, x)?;
        let pe = self.positions(packed)?;
        let pe = tape.constant(vec![packed.rows(), self.config.d_model], pe)?;
        tape.add(h, pe)
    }

    /// Runs encoder layer `l` (1-based); returns the new hidden state and the
    /// per-head attention outputs.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        l: usize,
        h: Var,
        layout: &Arc<AttentionLayout>,
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        let layer = self.enc.get(l.wrapping_sub(1)).ok_or(Error::Bounds {
            op: "encoder_layer",
            index: l,
            extent: self.enc.len(),
        })?;
        let z = self.norm(tape, p, layer.ln1, h)?;
        let (a, heads) = self.mha(tape, p, &layer.attn, z, z, layout)?;
        let a = dropout.apply(tape, a)?;
        let h = tape.add(h, a)?;
        let z = self.norm(tape, p, layer.ln2, h)?;
        let f = self.feed_forward(tape, p, layer.ff1, layer.ff2, z)?;
        let f = dropout.apply(tape, f)?;
        let h = tape.add(h, f)?;
        self.check_finite(tape, h, &format!("encoder layer {l}"))?;
        Ok((h, heads))
    }

    /// Runs layers `from..=to` (1-based) starting from hidden state `h`.
    pub fn encoder_layers(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        h: Var,
        packed: &Packed,
        layers: std::ops::RangeInclusive<usize>,
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let layout = packed.self_layout(false);
        let mut h = h;
        let mut tracks = Vec::new();
        for l in layers {
            let (next, heads) = self.encoder_layer(tape, p, l, h, &layout, dropout)?;
            h = next;
            tracks.push(heads);
        }
        Ok((h, tracks))
    }

    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        seqs: &[&FeatureSequence],
        dropout: &mut Dropout,
    ) -> Result<EncoderTrace> {
        let (data, packed) = self.pack_inputs(seqs)?;
        let h = self.embed_inputs(tape, p, data, &packed)?;
        self.check_finite(tape, h, "frontend")?;
        let (h, head_tracks) = self.encoder_layers(tape, p, h, &packed, 1..=self.config.enc_layers, dropout)?;
        let states = self.norm(tape, p, self.enc_norm, h)?;
        Ok(EncoderTrace {
            states,
            head_tracks,
            packed,
        })
    }

    /// Inference-only forward of each sequence.
    pub fn encoder_forward(&self, seqs: &[&FeatureSequence]) -> Result<Vec<EncoderOutput<F>>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let trace = self.encode(&mut tape, &p, seqs, &mut Dropout::off())?;
        Ok(self.materialize(&tape, &trace))
    }

    pub fn materialize(&self, tape: &Tape<F>, trace: &EncoderTrace) -> Vec<EncoderOutput<F>> {
        let rows = |v: Var, r: &Range<usize>| -> Tensor<F> {
            let cols = tape.shape(v)[1];
            Tensor::new(vec![r.len(), cols], tape.value(v)[r.start * cols..r.end * cols].to_vec())
                .expect("consistent")
        };
        trace
            .packed
            .segments
            .iter()
            .map(|r| EncoderOutput {
                states: rows(trace.states, r),
                head_tracks: trace
                    .head_tracks
                    .iter()
                    .map(|layer| layer.iter().map(|&h| rows(h, r)).collect())
                    .collect(),
                speaker_layers: self.config.disentangled_layers(),
                speaker_head: self.config.speaker_head,
                valid: trace.packed.valid[r.clone()].to_vec(),
            })
            .collect()
    }

    /// `head_tracks` entries of the speaker head of every disentangled layer.
    pub fn speaker_tracks(&self, trace: &EncoderTrace) -> Vec<Var> {
        self.config
            .disentangled_layers()
            .iter()
            .map(|&l| trace.head_tracks[l - 1][self.config.speaker_head - 1])
            .collect()
    }

    pub fn ctc_logits(&self, tape: &mut Tape<F>, p: &[Var], states: Var) -> Result<Var> {
        self.linear(tape, p, self.ctc, states)
    }

    /// Per-frame speaker activity logits, `rows × num_spk`.
    pub fn diar_logits(&self, tape: &mut Tape<F>, p: &[Var], track: Var) -> Result<Var> {
        let d = self
            .diar
            .ok_or_else(|| Error::Config("model has no diarization head".into()))?;
        self.linear(tape, p, d, track)
    }

    // ------------------------------------------------------------- decoder

    /// Next-token logits for every position of every token sequence, stacked
    /// along rows. Sequence `i` attends to rows `memory_segments[i]` of
    /// `memory` where `memory_valid` holds.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        tokens: &[&[usize]],
        memory: Var,
        memory_segments: &[Range<usize>],
        memory_valid: &[bool],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let c = &self.config;
        if tokens.len() != memory_segments.len() {
            return Err(Error::contract("decode: one memory segment per token sequence"));
        }
        let mut ids = Vec::new();
        for seq in tokens {
            if seq.is_empty() {
                return Err(Error::Input("decoder input must start with sos".into()));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= c.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} outside vocabulary of size {}",
                    c.vocab_size
                )));
            }
            ids.extend_from_slice(seq);
        }
        let lengths: Vec<usize> = tokens.iter().map(|s| s.len()).collect();
        let packed = Packed::from_lengths(&lengths);
        let emb = tape.gather_rows(p[self.embed.0], &ids)?;
        let emb = tape.scale(emb, F::of((c.d_model as f64).sqrt()));
        let pe = self.positions(&packed)?;
        let pe = tape.constant(vec![packed.rows(), c.d_model], pe)?;
        let mut h = tape.add(emb, pe)?;
        let self_layout = packed.self_layout(true);
        let cross_layout = Arc::new(AttentionLayout {
            q_segments: packed.segments.clone(),
            kv_segments: memory_segments.to_vec(),
            key_valid: (!memory_valid.iter().all(|&v| v)).then(|| memory_valid.to_vec()),
            causal: false,
        });
        for (i, layer) in self.dec.iter().enumerate() {
            let z = self.norm(tape, p, layer.ln1, h)?;
            let (a, _) = self.mha(tape, p, &layer.self_attn, z, z, &self_layout)?;
            let a = dropout.apply(tape, a)?;
            h = tape.add(h, a)?;
            let z = self.norm(tape, p, layer.ln2, h)?;
            let (a, _) = self.mha(tape, p, &layer.cross, z, memory, &cross_layout)?;
            let a = dropout.apply(tape, a)?;
            h = tape.add(h, a)?;
            let z = self.norm(tape, p, layer.ln3, h)?;
            let f = self.feed_forward(tape, p, layer.ff1, layer.ff2, z)?;
            let f = dropout.apply(tape, f)?;
            h = tape.add(h, f)?;
            self.check_finite(tape, h, &format!("decoder layer {}", i + 1))?;
        }
        let h = self.norm(tape, p, self.dec_norm, h)?;
        self.linear(tape, p, self.out, h)
    }

    /// Names of the trainable set during diarization training: the
    /// disentangled layers and the diarization head.
    pub fn diar_trainable(&self, name: &str) -> bool {
        name.starts_with("diar.")
            || self
                .config
                .disentangled_layers()
                .iter()
                .any(|&l| name.starts_with(&Self::layer_prefix(l)))
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        let mut params = ParamStore::default();
        for (n, t) in self.params.iter() {
            let mut c = t.cast::<G>();
            c.set_requires_grad(t.requires_grad());
            params.add(n, c);
        }
        Model {
            config: self.config.clone(),
            params,
            cmvn_mean: self.cmvn_mean,
            cmvn_istd: self.cmvn_istd,
            frontend: self.frontend,
            enc: self.enc.clone(),
            enc_norm: self.enc_norm,
            ctc: self.ctc,
            embed: self.embed,
            dec: self.dec.clone(),
            dec_norm: self.dec_norm,
            out: self.out,
            diar: self.diar,
        }
    }
}
