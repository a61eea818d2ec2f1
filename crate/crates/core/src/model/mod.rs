//! Transformer encoder/decoder with per-head track capture.

pub mod checkpoint;
mod config;
mod features;
mod network;
mod params;

pub use config::{Activation, LayerSelection, ModelConfig};
pub use features::{positional_encoding, FeatureNorm, FeatureSequence, DEFAULT_FRAME_SHIFT_S};
pub use network::{Dropout, EncoderOutput, EncoderTrace, Model, Packed};
pub use params::{ParamId, ParamStore, BUFFER_PREFIX};
