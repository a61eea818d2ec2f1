//! Experiment orchestration behind the `dtasr` command line.

mod asr;
mod config;
mod diar;
mod eval;
mod probe;
mod report;
mod state;

use std::path::Path;

pub use asr::{asr_pairs, cmd_train_asr, evaluate_loss, train_asr_model, AsrRun, EpochHook, TrainOptions};
pub use config::{DiarConfig, ExperimentConfig, ModeConfig, OptimConfig, TrainConfig};
pub use diar::{
    cmd_train_diar, diar_items, load_diar_model, predict_activity, score_activity, train_diar_model, DiarRun,
    FrozenInputs, DIAR_CHECKPOINT,
};
pub use eval::{cmd_eval, eval_asr, eval_diar, EvalReport, Task};
pub use probe::{check_indices, cmd_probe, probe_model, ProjectionRecord};
pub use report::{write_json, write_jsonl, DerPoint, EpochReport, RunReport};
pub use state::{
    load_model, prepare_out_dir, sibling_config, write_config, TrainState, BEST_CHECKPOINT, CONFIG_FILE,
    LAST_CHECKPOINT, REPORT_FILE,
};

use crate::error::Result;
use crate::synth::Generator;

/// `gen-corpus`: writes `asr/` and one directory per mixture scenario, each
/// with `train/`, `dev/` and `test/` splits.
pub fn cmd_gen_corpus(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let g = Generator::new(cfg.corpus.clone())?;
    prepare_out_dir(out_dir, force)?;
    g.write_all(out_dir)
}
