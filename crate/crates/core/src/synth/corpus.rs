use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureSequence;

use super::generator::{derive_rng, gen_speaker_profile, gen_utterance, tags, GeneratorConfig, SpeakerProfile, TokenTemplates, UtteranceSpec};
use super::io::{feature_path, write_dataset, Dataset, DatasetManifest, ManifestRecord};
use super::mixture::{mix_mixture, MixConfig, MixtureScenario, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    /// First global index of split `s`.
    fn offset(&self, s: Split) -> usize {
        Split::ALL.iter().take_while(|&&x| x != s).map(|&x| self.get(x)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub mix: MixConfig,
    pub asr: SplitCounts,
    pub mixtures: SplitCounts,
    pub scenarios: Vec<ScenarioKind>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig::default(),
            mix: MixConfig::default(),
            asr: SplitCounts {
                train: 1600,
                dev: 200,
                test: 200,
            },
            mixtures: SplitCounts {
                train: 300,
                dev: 50,
                test: 50,
            },
            scenarios: ScenarioKind::ALL.to_vec(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let needs_two = self.scenarios.iter().any(|k| k.sources() == 2);
        if needs_two && self.generator.num_speakers < 2 {
            return Err(Error::Config("two-speaker scenarios need num_speakers >= 2".into()));
        }
        let (lo, hi) = self.mix.gap_frames;
        if lo > hi || self.mix.snr_db.0 > self.mix.snr_db.1 {
            return Err(Error::Config("gap_frames and snr_db must be ordered (low, high)".into()));
        }
        Ok(())
    }

    /// Content tokens plus blank, sos and eos.
    pub fn vocab_size(&self) -> usize {
        self.generator.content_tokens + 3
    }
}

/// Profiles and templates shared by every split.
pub struct Generator {
    pub config: CorpusConfig,
    pub profiles: Vec<SpeakerProfile>,
    pub templates: TokenTemplates,
}

impl Generator {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        config.validate()?;
        let profiles = (0..config.generator.num_speakers)
            .map(|s| gen_speaker_profile(config.seed, s, &config.generator))
            .collect();
        let templates = TokenTemplates::generate(config.seed, &config.generator);
        Ok(Self {
            config,
            profiles,
            templates,
        })
    }

    fn render(&self, spec: &UtteranceSpec) -> Result<FeatureSequence> {
        let g = &self.config.generator;
        Ok(gen_utterance(spec, &self.profiles[spec.speaker_id], &self.templates, g.jitter_std, g.frame_shift_s)?.0)
    }

    fn manifest(&self, kind: String, records: Vec<ManifestRecord>) -> DatasetManifest {
        DatasetManifest {
            seed: self.config.seed,
            d_feat: self.config.generator.d_feat,
            frame_shift_s: self.config.generator.frame_shift_s,
            vocab_size: self.config.vocab_size(),
            kind,
            records,
        }
    }

    /// Spec of global single-speaker utterance `index`; speakers cycle.
    pub fn utterance_spec(&self, index: usize) -> UtteranceSpec {
        let mut rng = derive_rng(self.config.seed, tags::UTTERANCE, index as u64);
        let spk = index % self.config.generator.num_speakers;
        UtteranceSpec::sample(&mut rng, spk, &self.config.generator)
    }

    pub fn asr_split(&self, split: Split) -> Result<Dataset> {
        let start = self.config.asr.offset(split);
        let mut records = Vec::new();
        let mut features = Vec::new();
        for index in start..start + self.config.asr.get(split) {
            let spec = self.utterance_spec(index);
            let seq = self.render(&spec)?;
            let id = format!("utt{index:05}");
            records.push(ManifestRecord {
                path: feature_path(&id),
                id,
                frames: seq.len(),
                speakers: vec![spec.speaker_id],
                transcripts: vec![spec.tokens.clone()],
                labels: None,
            });
            features.push(seq);
        }
        Ok(Dataset {
            manifest: self.manifest("asr".into(), records),
            features,
        })
    }

    pub fn mixture_scenario(&self, kind: ScenarioKind, index: usize) -> MixtureScenario {
        let code = ScenarioKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
        let mut rng = derive_rng(self.config.seed, tags::MIXTURE, (code << 32) | index as u64);
        let g = &self.config.generator;
        let first = rng.random_range(0..g.num_speakers);
        let mut speakers = vec![first];
        if kind.sources() == 2 {
            let mut second = rng.random_range(0..g.num_speakers - 1);
            if second >= first {
                second += 1;
            }
            speakers.push(second);
        }
        let sources = speakers.iter().map(|&s| UtteranceSpec::sample(&mut rng, s, g)).collect();
        MixtureScenario::sample(kind, sources, &mut rng, &self.config.mix)
    }

    pub fn mixture_split(&self, kind: ScenarioKind, split: Split) -> Result<Dataset> {
        let start = self.config.mixtures.offset(split);
        let mut records = Vec::new();
        let mut features = Vec::new();
        for index in start..start + self.config.mixtures.get(split) {
            let sc = self.mixture_scenario(kind, index);
            let srcs = sc.sources.iter().map(|s| self.render(s)).collect::<Result<Vec<_>>>()?;
            let (seq, labels) = mix_mixture(&sc, &srcs, self.config.mix.noise_pole)?;
            let id = format!("{}_{index:05}", kind.dir_name());
            records.push(ManifestRecord {
                path: feature_path(&id),
                id,
                frames: seq.len(),
                speakers: sc.sources.iter().map(|s| s.speaker_id).collect(),
                transcripts: sc.sources.iter().map(|s| s.tokens.clone()).collect(),
                labels: Some(labels),
            });
            features.push(seq);
        }
        Ok(Dataset {
            manifest: self.manifest(kind.code().into(), records),
            features,
        })
    }

    /// Writes `asr/<split>` and `<mixN>/<split>` under `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            let ds = self.asr_split(split)?;
            write_dataset(&ds.manifest, &ds.features, &dir.join("asr").join(split.name()))?;
            for &kind in &self.config.scenarios {
                let ds = self.mixture_split(kind, split)?;
                write_dataset(&ds.manifest, &ds.features, &dir.join(kind.dir_name()).join(split.name()))?;
            }
        }
        Ok(())
    }
}
