use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grad::AdamState;
use crate::model::checkpoint::{self, Record};
use crate::model::Model;

use super::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const BEST_CHECKPOINT: &str = "best.dtck";
pub const LAST_CHECKPOINT: &str = "last.dtck";

/// A u64 as four exactly representable 16-bit chunks.
/// Numeric failures inside a training step, tagged with where they happened.
pub(crate) fn at_step(e: Error, epoch: usize, step: u64) -> Error {
    match e {
        Error::Numeric(_) | Error::NonFinite { .. } => Error::Numeric(format!("{e} at epoch {epoch}, step {step}")),
        other => other,
    }
}

pub(crate) fn u64_record(name: &str, v: u64) -> Record {
    let data = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Record::new(name, vec![4], data)
}

pub(crate) fn read_u64(records: &[Record], name: &str) -> Result<u64> {
    let r = records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Config(format!("checkpoint has no `{name}` record")))?;
    if r.data.len() != 4 {
        return Err(Error::Config(format!("`{name}` must hold 4 values")));
    }
    Ok(r.data.iter().enumerate().map(|(i, &x)| (x as u64) << (16 * i)).sum())
}

/// Optimizer moments and progress saved next to the model weights.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    pub epochs_done: usize,
    pub best_dev: f64,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn to_records(&self, model: &Model<f32>) -> Vec<Record> {
        let mut out = Vec::new();
        for (i, (name, t)) in model.params.iter().enumerate() {
            out.push(Record::new(format!("optim.m.{name}"), t.shape().to_vec(), self.adam.m[i].clone()));
            out.push(Record::new(format!("optim.v.{name}"), t.shape().to_vec(), self.adam.v[i].clone()));
        }
        out.push(u64_record("optim.step", self.adam.step));
        out.push(u64_record("train.epoch", self.epochs_done as u64));
        out.push(u64_record("train.best_dev", self.best_dev.to_bits()));
        out.push(u64_record("train.best_epoch", self.best_epoch.map_or(0, |e| e as u64)));
        out
    }

    pub fn from_records(records: &[Record], model: &Model<f32>, template: &AdamState<f32>) -> Result<Self> {
        let mut adam = template.clone();
        for (i, (name, t)) in model.params.iter().enumerate() {
            for (prefix, slot) in [("optim.m.", &mut adam.m[i]), ("optim.v.", &mut adam.v[i])] {
                let key = format!("{prefix}{name}");
                let r = records
                    .iter()
                    .find(|r| r.name == key)
                    .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}` record")))?;
                if r.shape != t.shape() {
                    return Err(Error::Config(format!("`{key}` has shape {:?}, expected {:?}", r.shape, t.shape())));
                }
                slot.clone_from(&r.data);
            }
        }
        adam.step = read_u64(records, "optim.step")?;
        let best_epoch = read_u64(records, "train.best_epoch")? as usize;
        Ok(Self {
            adam,
            epochs_done: read_u64(records, "train.epoch")? as usize,
            best_dev: f64::from_bits(read_u64(records, "train.best_dev")?),
            best_epoch: (best_epoch > 0).then_some(best_epoch),
        })
    }
}

/// Creates `dir`; a non-empty existing directory needs `force`, which clears it.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
}

/// The `config.toml` stored beside a checkpoint.
pub fn sibling_config(checkpoint: &Path) -> Result<ExperimentConfig> {
    let dir: PathBuf = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    ExperimentConfig::load(&dir.join(CONFIG_FILE))
}

/// Restores a model from a checkpoint and the configuration saved beside it.
pub fn load_model(checkpoint_path: &Path) -> Result<(ExperimentConfig, Model<f32>)> {
    let cfg = sibling_config(checkpoint_path)?;
    let records = checkpoint::read(checkpoint_path)?;
    let mut model = Model::<f32>::new(cfg.effective_model())?;
    if let Some(n) = diar_speakers(&records) {
        model.add_diar_head(n, cfg.train.seed);
    }
    model.load_records(&records)?;
    Ok((cfg, model))
}

/// Speaker count of a stored diarization head.
pub(crate) fn diar_speakers(records: &[Record]) -> Option<usize> {
    records.iter().find(|r| r.name == "diar.b").map(|r| r.data.len())
}
