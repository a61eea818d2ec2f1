use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{clip_grad_norm, AdamState, NoamSchedule, Tape};
use crate::model::checkpoint::{self, Record};
use crate::model::{Dropout, FeatureNorm, FeatureSequence, Model};
use crate::objectives::{asr_objective, asr_total_loss, LossBreakdown};
use crate::synth::{derive_rng, read_dataset, Dataset, Split};

use super::config::ExperimentConfig;
use super::report::{write_json, EpochReport, RunReport};
use super::state::{at_step, prepare_out_dir, write_config, TrainState, BEST_CHECKPOINT, LAST_CHECKPOINT, REPORT_FILE};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const DROPOUT_TAG: u64 = 0x4452_4f50;

/// `(features, transcript)` pairs of a single-speaker dataset.
pub fn asr_pairs(ds: &Dataset) -> Result<Vec<(&FeatureSequence, &[usize])>> {
    ds.features
        .iter()
        .zip(&ds.manifest.records)
        .map(|(f, r)| match r.transcripts.as_slice() {
            [t] => Ok((f, t.as_slice())),
            _ => Err(Error::Input(format!("record `{}` is not a single-speaker utterance", r.id))),
        })
        .collect()
}

pub(crate) fn adam_for(cfg: &ExperimentConfig, model: &Model<f32>) -> AdamState<f32> {
    AdamState::with_hyper(model.params.tensors(), cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
}

fn weighted_mean(parts: &[(LossBreakdown, usize)], alpha: f64) -> Result<LossBreakdown> {
    let n: usize = parts.iter().map(|p| p.1).sum();
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(|(b, k)| f(b) * *k as f64).sum::<f64>() / n.max(1) as f64;
    asr_total_loss(avg(|b| b.l_ctc), avg(|b| b.l_attn), avg(|b| b.l_s), alpha)
}

/// Teacher-forced loss of `pairs` without dropout.
pub fn evaluate_loss(
    model: &Model<f32>,
    cfg: &ExperimentConfig,
    pairs: &[(&FeatureSequence, &[usize])],
) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for batch in pairs.chunks(cfg.train.batch_size) {
        let mut tape = Tape::inference();
        let vars = model.params.bind(&mut tape);
        let l = asr_objective(model, &mut tape, &vars, batch, &cfg.loss, &mut Dropout::off())?;
        parts.push((l.breakdown, batch.len()));
    }
    weighted_mean(&parts, cfg.loss.alpha)
}

/// Called after every epoch with the model, the optimizer state, the epoch
/// report and whether the dev loss improved.
pub type EpochHook<'a> = dyn FnMut(&Model<f32>, &TrainState, &EpochReport, bool) -> Result<()> + 'a;

pub struct AsrRun {
    /// Parameters of the epoch with the lowest dev loss (the last epoch
    /// without a dev set).
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub report: RunReport,
}

/// Trains encoder and decoder on single-speaker utterances.
pub fn train_asr_model(
    cfg: &ExperimentConfig,
    train: &Dataset,
    dev: Option<&Dataset>,
    resume: Option<&[Record]>,
    hook: &mut EpochHook<'_>,
) -> Result<AsrRun> {
    cfg.validate()?;
    let started = Instant::now();
    let pairs = asr_pairs(train)?;
    if pairs.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let dev_pairs = dev.map(asr_pairs).transpose()?.filter(|p| !p.is_empty());
    let mcfg = cfg.effective_model();
    let mut model = Model::<f32>::new(mcfg.clone())?;
    let d = mcfg.d_feat;
    model.set_feature_norm(&FeatureNorm::estimate(train.features.iter(), d))?;
    let mut state = TrainState {
        adam: adam_for(cfg, &model),
        epochs_done: 0,
        best_dev: f64::INFINITY,
        best_epoch: None,
    };
    if let Some(records) = resume {
        model.load_records(records)?;
        state = TrainState::from_records(records, &model, &state.adam)?;
    }
    let schedule = NoamSchedule {
        peak_lr: cfg.optim.peak_lr,
        warmup: cfg.optim.warmup_steps,
    };
    let seed = cfg.train.seed;
    let mut best = model.clone();
    let mut report = RunReport {
        task: "asr".into(),
        config_hash: cfg.hash()?,
        seed,
        epochs: Vec::new(),
        best_epoch: state.best_epoch,
        der: Vec::new(),
        trainable_params: model.params.trainable_count(),
        total_params: model.params.total_count(),
        wall_clock_s: 0.0,
    };
    for epoch in state.epochs_done + 1..=cfg.train.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut derive_rng(seed, SHUFFLE_TAG, epoch as u64));
        let mut parts = Vec::new();
        let mut first_step_loss = f64::NAN;
        let mut skipped = 0;
        for (k, idx) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| pairs[i]).collect();
            let step = state.adam.step + 1;
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let mut dropout = Dropout::new(mcfg.dropout_rate, derive_rng(seed, DROPOUT_TAG, step).random::<u64>());
            let loss = asr_objective(&model, &mut tape, &vars, &batch, &cfg.loss, &mut dropout)
                .map_err(|e| at_step(e, epoch, step))?;
            let value = tape.item(loss.total) as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at epoch {epoch}, step {step}")));
            }
            if k == 0 {
                first_step_loss = loss.breakdown.total;
            }
            skipped += loss.ctc_skipped;
            let grads = tape.backward(loss.total)?;
            model.params.zero_grads();
            for (v, t) in vars.iter().zip(model.params.tensors_mut()) {
                if t.requires_grad() {
                    grads.accumulate_into(*v, t);
                }
            }
            if cfg.optim.clip_norm > 0.0 {
                let norm = clip_grad_norm(model.params.tensors_mut(), cfg.optim.clip_norm);
                if !norm.is_finite() {
                    return Err(Error::Numeric(format!("gradient norm is {norm} at epoch {epoch}, step {step}")));
                }
            }
            state.adam.step(model.params.tensors_mut(), schedule.lr(step))?;
            parts.push((loss.breakdown, batch.len()));
        }
        model.params.zero_grads();
        let train_mean = weighted_mean(&parts, cfg.loss.alpha)?;
        let dev_loss = dev_pairs.as_ref().map(|p| evaluate_loss(&model, cfg, p)).transpose()?;
        let score = dev_loss.as_ref().map_or(f64::NEG_INFINITY, |b| b.total);
        let improved = score < state.best_dev || dev_loss.is_none();
        if improved {
            state.best_dev = score;
            state.best_epoch = Some(epoch);
            best = model.clone();
        }
        state.epochs_done = epoch;
        let er = EpochReport {
            epoch,
            steps: parts.len(),
            train_loss: train_mean.total,
            train: Some(train_mean),
            dev: dev_loss,
            first_step_loss,
            ctc_skipped: skipped,
        };
        log::info!(
            "asr epoch {epoch}: train {:.4} dev {}",
            er.train_loss,
            dev_loss.map_or("-".into(), |b| format!("{:.4}", b.total))
        );
        hook(&model, &state, &er, improved)?;
        report.epochs.push(er);
    }
    report.best_epoch = state.best_epoch;
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(AsrRun {
        best,
        last: model,
        report,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub force: bool,
    /// `last.dtck` of an earlier run with the same configuration.
    pub resume: Option<PathBuf>,
}

/// `train-asr`: reads `<data>/train` and `<data>/dev`, writes checkpoints,
/// `config.toml` and `report.json` to `out`.
pub fn cmd_train_asr(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<RunReport> {
    cfg.validate()?;
    let train = read_dataset(&data_dir.join(Split::Train.name()))?;
    let dev_dir = data_dir.join(Split::Dev.name());
    let dev = if dev_dir.exists() { Some(read_dataset(&dev_dir)?) } else { None };
    let resume = opts.resume.as_deref().map(checkpoint::read).transpose()?;
    if resume.is_none() {
        prepare_out_dir(out_dir, opts.force)?;
    } else {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    write_config(out_dir, cfg)?;
    let mut hook = |m: &Model<f32>, st: &TrainState, _: &EpochReport, improved: bool| -> Result<()> {
        let weights = m.to_records();
        if improved {
            checkpoint::write(&out_dir.join(BEST_CHECKPOINT), &weights)?;
        }
        let mut all = weights;
        all.extend(st.to_records(m));
        checkpoint::write(&out_dir.join(LAST_CHECKPOINT), &all)
    };
    let run = train_asr_model(cfg, &train, dev.as_ref(), resume.as_deref(), &mut hook)?;
    write_json(&out_dir.join(REPORT_FILE), &run.report)?;
    Ok(run.report)
}
