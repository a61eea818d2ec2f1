use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decode::{recognize, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{wer, DerBreakdown, DerCounts, ScoreSummary, WerBreakdown};
use crate::model::Model;
use crate::objectives::DiarizationLabels;
use crate::synth::{read_dataset, Dataset};

use super::asr::asr_pairs;
use super::config::DiarConfig;
use super::diar::{diar_items, predict_activity, score_activity, FrozenInputs};
use super::report::write_json;
use super::state::load_model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Diar,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Task::Asr),
            "diar" => Ok(Task::Diar),
            other => Err(Error::Config(format!("unknown task {other:?}; expected asr or diar"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Asr => "asr",
            Task::Diar => "diar",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub items: usize,
    pub summary: ScoreSummary,
    pub wer: Option<WerBreakdown>,
    pub der: Option<DerBreakdown>,
    pub der_counts: Option<DerCounts>,
}

/// Pooled WER of joint beam search over a single-speaker split.
pub fn eval_asr(model: &Model<f32>, beam: &BeamConfig, ds: &Dataset) -> Result<WerBreakdown> {
    let pairs = asr_pairs(ds)?;
    if pairs.is_empty() {
        return Err(Error::Input("cannot evaluate ASR on an empty split".into()));
    }
    let mut total: Option<WerBreakdown> = None;
    for (f, y) in pairs {
        let hyp = recognize(model, f, beam)?;
        let w = wer(y, &hyp.tokens)?;
        total = Some(total.map_or(w, |t| t.merge(&w)));
    }
    Ok(total.expect("non-empty split"))
}

/// Pooled DER of the thresholded speaker decoder over a mixture split.
pub fn eval_diar(model: &Model<f32>, dc: &DiarConfig, ds: &Dataset) -> Result<DerCounts> {
    let items = diar_items(ds)?;
    if items.is_empty() {
        return Err(Error::Input("cannot evaluate diarization on an empty split".into()));
    }
    let cache = FrozenInputs::compute(model, &items)?;
    let hyps = predict_activity(model, &cache, dc.threshold, ds.manifest.frame_shift_s)?;
    let refs: Vec<&DiarizationLabels> = items.iter().map(|x| x.1).collect();
    score_activity(&refs, &hyps, dc)
}

/// `eval`: scores `checkpoint` on the split in `data_dir`; writes the report
/// to `out` when given.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, task: Task, out: Option<&Path>) -> Result<EvalReport> {
    let (cfg, model) = load_model(checkpoint)?;
    let ds = read_dataset(data_dir)?;
    let report = match task {
        Task::Asr => {
            if ds.manifest.kind != "asr" {
                return Err(Error::Config(format!(
                    "asr evaluation needs a single-speaker split, {} holds `{}` data",
                    data_dir.display(),
                    ds.manifest.kind
                )));
            }
            let w = eval_asr(&model, &cfg.decode, &ds)?;
            EvalReport {
                task,
                items: ds.len(),
                summary: ScoreSummary::from_wer(&w),
                wer: Some(w),
                der: None,
                der_counts: None,
            }
        }
        Task::Diar => {
            let Some(n) = model.num_speakers() else {
                return Err(Error::Config(format!("{} is not a diarization checkpoint", checkpoint.display())));
            };
            if ds.manifest.records.iter().any(|r| r.labels.as_ref().is_none_or(|l| l.num_spk() != n)) {
                return Err(Error::Config(format!(
                    "diarization head predicts {n} speakers but {} holds other data",
                    data_dir.display()
                )));
            }
            let c = eval_diar(&model, &cfg.diar, &ds)?;
            EvalReport {
                task,
                items: ds.len(),
                summary: ScoreSummary::from_der(&c, ds.manifest.frame_shift_s),
                wer: None,
                der: Some(c.breakdown(ds.manifest.frame_shift_s)),
                der_counts: Some(c),
            }
        }
    };
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(report)
}
