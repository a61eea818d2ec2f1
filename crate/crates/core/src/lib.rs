//! Disentangled-Transformer speech recognition at desk scale.

pub mod decode;
pub mod error;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synth;
pub(crate) mod perm;

pub use error::{Error, Result};
