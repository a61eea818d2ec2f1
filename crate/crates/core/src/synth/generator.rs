use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::FeatureSequence;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(base, tag, index)`.
pub fn derive_rng(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(base ^ splitmix(tag ^ splitmix(index))))
}

pub(crate) mod tags {
    pub const SPEAKER: u64 = 1;
    pub const TEMPLATES: u64 = 2;
    pub const UTTERANCE: u64 = 3;
    pub const MIXTURE: u64 = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub d_feat: usize,
    pub num_speakers: usize,
    pub content_tokens: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub jitter_std: f64,
    pub bias_std: f64,
    pub gain_range: (f64, f64),
    pub level_db: (f64, f64),
    pub frame_shift_s: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_feat: 40,
            num_speakers: 10,
            content_tokens: 20,
            min_tokens: 5,
            max_tokens: 15,
            min_duration: 3,
            max_duration: 8,
            jitter_std: 0.1,
            bias_std: 0.5,
            gain_range: (0.7, 1.3),
            level_db: (-33.0, -25.0),
            frame_shift_s: 0.01,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.d_feat == 0 || self.num_speakers == 0 || self.content_tokens == 0 {
            return bad("d_feat, num_speakers and content_tokens must be positive");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token count range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("duration range must satisfy 1 <= min_duration <= max_duration");
        }
        if self.level_db.0 > self.level_db.1 || self.gain_range.0 > self.gain_range.1 {
            return bad("level_db and gain_range must be ordered (low, high)");
        }
        if !(self.jitter_std >= 0.0 && self.bias_std >= 0.0) {
            return bad("jitter_std and bias_std must be >= 0");
        }
        Ok(())
    }
}

/// Time-constant speaker factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub seed: u64,
}

pub fn gen_speaker_profile(corpus_seed: u64, speaker_id: usize, cfg: &GeneratorConfig) -> SpeakerProfile {
    let seed = splitmix(corpus_seed ^ splitmix(speaker_id as u64));
    let mut rng = derive_rng(corpus_seed, tags::SPEAKER, speaker_id as u64);
    let normal = Normal::new(0.0, cfg.bias_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let bias = (0..cfg.d_feat).map(|_| normal.sample(&mut rng)).collect();
    let (lo, hi) = cfg.gain_range;
    let gain = (0..cfg.d_feat)
        .map(|_| if lo < hi { rng.random_range(lo..=hi) } else { lo })
        .collect();
    SpeakerProfile {
        speaker_id,
        bias,
        gain,
        seed,
    }
}

/// Per-token mean frame `m_v`; index 0 (blank) is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTemplates {
    pub means: Vec<Vec<f64>>,
}

impl TokenTemplates {
    pub fn generate(corpus_seed: u64, cfg: &GeneratorConfig) -> Self {
        let mut rng = derive_rng(corpus_seed, tags::TEMPLATES, 0);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let mut means = vec![vec![0.0; cfg.d_feat]];
        for _ in 0..cfg.content_tokens {
            means.push((0..cfg.d_feat).map(|_| n.sample(&mut rng)).collect());
        }
        Self { means }
    }

    pub fn covers(&self, token: usize) -> bool {
        token >= 1 && token < self.means.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSpec {
    pub speaker_id: usize,
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub jitter_seed: u64,
    pub level_db: f64,
}

impl UtteranceSpec {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn sample(rng: &mut ChaCha8Rng, speaker_id: usize, cfg: &GeneratorConfig) -> Self {
        let n = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let tokens = (0..n).map(|_| rng.random_range(1..=cfg.content_tokens)).collect();
        let durations = (0..n)
            .map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration))
            .collect();
        let (lo, hi) = cfg.level_db;
        let level_db = if lo < hi { rng.random_range(lo..hi) } else { lo };
        Self {
            speaker_id,
            tokens,
            durations,
            jitter_seed: rng.random(),
            level_db,
        }
    }
}

pub fn rms(data: &[f32]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    (data.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / data.len() as f64).sqrt()
}

pub fn rms_db(data: &[f32]) -> f64 {
    20.0 * rms(data).log10()
}

/// Unscaled frames `g ⊙ (m_v + ε_t) + b`.
pub fn raw_frames(
    spec: &UtteranceSpec,
    profile: &SpeakerProfile,
    templates: &TokenTemplates,
    jitter_std: f64,
) -> Result<Vec<f64>> {
    if spec.tokens.len() != spec.durations.len() {
        return Err(Error::Input("utterance tokens and durations differ in length".into()));
    }
    let d = profile.bias.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.jitter_seed);
    let normal = (jitter_std > 0.0).then(|| Normal::new(0.0, jitter_std).expect("valid std"));
    let mut out = Vec::with_capacity(spec.frames() * d);
    for (&tok, &dur) in spec.tokens.iter().zip(&spec.durations) {
        if !templates.covers(tok) {
            return Err(Error::Input(format!("token {tok} has no template")));
        }
        let m = &templates.means[tok];
        for _ in 0..dur {
            for j in 0..d {
                let eps = normal.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                out.push(profile.gain[j] * (m[j] + eps) + profile.bias[j]);
            }
        }
    }
    Ok(out)
}

/// Frames scaled so their RMS equals `spec.level_db` relative to unit full scale.
pub fn gen_utterance(
    spec: &UtteranceSpec,
    profile: &SpeakerProfile,
    templates: &TokenTemplates,
    jitter_std: f64,
    frame_shift_s: f64,
) -> Result<(FeatureSequence, Vec<usize>)> {
    let raw = raw_frames(spec, profile, templates, jitter_std)?;
    let d = profile.bias.len();
    let cur = (raw.iter().map(|x| x * x).sum::<f64>() / raw.len().max(1) as f64).sqrt();
    let target = 10f64.powf(spec.level_db / 20.0);
    let k = if cur > 0.0 { target / cur } else { 0.0 };
    let data: Vec<f32> = raw.iter().map(|x| (x * k) as f32).collect();
    let mut seq = FeatureSequence::new(Tensor::new(vec![spec.frames(), d], data)?)?;
    seq.frame_shift_s = frame_shift_s;
    Ok((seq, spec.tokens.clone()))
}
