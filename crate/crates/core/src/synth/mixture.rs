use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::FeatureSequence;
use crate::objectives::DiarizationLabels;

use super::generator::{rms, UtteranceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// 1.0: one speaker in colored noise.
    NoiseSingle,
    /// 2.0: two speakers back to back.
    ConcatNoSilence,
    /// 3.0: two speakers separated by silence.
    ConcatSilence,
    /// 4.0: two speakers from frame 0.
    FullOverlap,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::NoiseSingle,
        ScenarioKind::ConcatNoSilence,
        ScenarioKind::ConcatSilence,
        ScenarioKind::FullOverlap,
    ];

    pub fn sources(self) -> usize {
        match self {
            ScenarioKind::NoiseSingle => 1,
            _ => 2,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            ScenarioKind::NoiseSingle => "1.0",
            ScenarioKind::ConcatNoSilence => "2.0",
            ScenarioKind::ConcatSilence => "3.0",
            ScenarioKind::FullOverlap => "4.0",
        }
    }

    /// Dataset directory name.
    pub fn dir_name(self) -> &'static str {
        match self {
            ScenarioKind::NoiseSingle => "mix1",
            ScenarioKind::ConcatNoSilence => "mix2",
            ScenarioKind::ConcatSilence => "mix3",
            ScenarioKind::FullOverlap => "mix4",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1.0" | "1" | "mix1" => Ok(ScenarioKind::NoiseSingle),
            "2.0" | "2" | "mix2" => Ok(ScenarioKind::ConcatNoSilence),
            "3.0" | "3" | "mix3" => Ok(ScenarioKind::ConcatSilence),
            "4.0" | "4" | "mix4" => Ok(ScenarioKind::FullOverlap),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub snr_db: (f64, f64),
    /// Silence between the two sources of 3.0, and the noise-only lead-in and
    /// tail of 1.0.
    pub gap_frames: (usize, usize),
    /// AR(1) coefficient of the 1.0 noise.
    pub noise_pole: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            snr_db: (5.0, 15.0),
            gap_frames: (10, 50),
            noise_pole: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureScenario {
    pub kind: ScenarioKind,
    pub sources: Vec<UtteranceSpec>,
    /// 3.0: one gap between the sources. 1.0: lead-in and tail lengths.
    pub gaps: Vec<usize>,
    pub snr_db: Option<f64>,
    pub noise_seed: u64,
}

impl MixtureScenario {
    /// Samples gaps, SNR and the noise seed for already chosen sources.
    pub fn sample(kind: ScenarioKind, sources: Vec<UtteranceSpec>, rng: &mut ChaCha8Rng, cfg: &MixConfig) -> Self {
        let (glo, ghi) = cfg.gap_frames;
        let mut gap = || rng.random_range(glo..=ghi);
        let gaps = match kind {
            ScenarioKind::ConcatSilence => vec![gap()],
            ScenarioKind::NoiseSingle => vec![gap(), gap()],
            _ => Vec::new(),
        };
        let snr_db = (kind == ScenarioKind::NoiseSingle).then(|| {
            let (lo, hi) = cfg.snr_db;
            if lo < hi {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        });
        Self {
            kind,
            sources,
            gaps,
            snr_db,
            noise_seed: rng.random(),
        }
    }
}

fn place(out: &mut [f32], d: usize, src: &FeatureSequence, at: usize) {
    for (i, v) in src.frames.data().iter().enumerate() {
        out[at * d + i] += *v;
    }
}

/// Builds the mixture and its frame-level speaker activity.
pub fn mix_mixture(
    scenario: &MixtureScenario,
    sources: &[FeatureSequence],
    noise_pole: f64,
) -> Result<(FeatureSequence, DiarizationLabels)> {
    let kind = scenario.kind;
    if sources.len() != kind.sources() {
        return Err(Error::contract(format!(
            "scenario {kind} takes {} source(s), got {}",
            kind.sources(),
            sources.len()
        )));
    }
    let d = sources[0].dim();
    if sources.iter().any(|s| s.dim() != d) {
        return Err(Error::contract("mixture sources differ in feature dimension"));
    }
    let shift = sources[0].frame_shift_s;
    let lens: Vec<usize> = sources.iter().map(FeatureSequence::len).collect();
    let (total, offsets) = match kind {
        ScenarioKind::NoiseSingle => {
            let (lead, tail) = (scenario.gaps[0], scenario.gaps[1]);
            (lead + lens[0] + tail, vec![lead])
        }
        ScenarioKind::ConcatNoSilence => (lens[0] + lens[1], vec![0, lens[0]]),
        ScenarioKind::ConcatSilence => {
            let g = scenario.gaps[0];
            (lens[0] + g + lens[1], vec![0, lens[0] + g])
        }
        ScenarioKind::FullOverlap => (lens[0].max(lens[1]), vec![0, 0]),
    };
    let mut data = vec![0.0f32; total * d];
    let mut activity = vec![vec![false; total]; sources.len()];
    for (k, (s, &at)) in sources.iter().zip(&offsets).enumerate() {
        place(&mut data, d, s, at);
        activity[k][at..at + s.len()].iter_mut().for_each(|a| *a = true);
    }
    if let Some(snr) = scenario.snr_db {
        let signal = rms(sources[0].frames.data());
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.noise_seed);
        let a = noise_pole.clamp(0.0, 0.999);
        let innov = (1.0 - a * a).sqrt();
        let mut state: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut noise = Vec::with_capacity(total * d);
        for _ in 0..total {
            for s in state.iter_mut() {
                let w: f64 = StandardNormal.sample(&mut rng);
                *s = a * *s + innov * w;
                noise.push(*s);
            }
        }
        let n_rms = (noise.iter().map(|x| x * x).sum::<f64>() / noise.len().max(1) as f64).sqrt();
        let k = if n_rms > 0.0 { signal / 10f64.powf(snr / 20.0) / n_rms } else { 0.0 };
        for (x, n) in data.iter_mut().zip(&noise) {
            *x += (n * k) as f32;
        }
    }
    let mut seq = FeatureSequence::new(Tensor::new(vec![total, d], data)?)?;
    seq.frame_shift_s = shift;
    Ok((seq, DiarizationLabels::new(activity, shift)?))
}
