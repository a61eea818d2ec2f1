//! Synthetic utterances with a time-constant speaker factor, the four
//! mixture scenarios and the on-disk dataset format.

mod corpus;
mod generator;
mod io;
mod mixture;

pub use corpus::{CorpusConfig, Generator, Split, SplitCounts};
pub use generator::{
    derive_rng, gen_speaker_profile, gen_utterance, raw_frames, rms, rms_db, GeneratorConfig, SpeakerProfile,
    TokenTemplates, UtteranceSpec,
};
pub use io::{
    decode_features, encode_features, feature_path, format_manifest, parse_manifest, read_dataset, write_dataset,
    Dataset, DatasetManifest, ManifestRecord, FEATURE_MAGIC, FEATURE_VERSION, MANIFEST_FILE,
};
pub use mixture::{mix_mixture, MixConfig, MixtureScenario, ScenarioKind};
