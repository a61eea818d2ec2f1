use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{AdamState, Tape, Tensor, Var};
use crate::metrics::{der_counts, DerCounts};
use crate::model::checkpoint;
use crate::model::{Dropout, Model, Packed};
use crate::objectives::{pit_bce_tape, DiarizationLabels};
use crate::synth::{derive_rng, read_dataset, Dataset, Split};

use super::config::{DiarConfig, ExperimentConfig};
use super::report::{write_json, DerPoint, EpochReport, RunReport};
use super::state::{at_step, load_model, prepare_out_dir, write_config, REPORT_FILE};

pub const DIAR_CHECKPOINT: &str = "diar.dtck";
const SHUFFLE_TAG: u64 = 0x4449_4152;
const HEAD_TAG: u64 = 0x4845_4144;

/// Mixtures with their reference activity.
pub fn diar_items(ds: &Dataset) -> Result<Vec<(&crate::model::FeatureSequence, &DiarizationLabels)>> {
    ds.features
        .iter()
        .zip(&ds.manifest.records)
        .map(|(f, r)| {
            r.labels
                .as_ref()
                .map(|l| (f, l))
                .ok_or_else(|| Error::Input(format!("record `{}` has no speaker labels", r.id)))
        })
        .collect()
}

/// Encoder prefix below the lowest trainable layer, run once per mixture.
pub struct FrozenInputs {
    /// First layer that is recomputed during training (1-based).
    pub first: usize,
    /// Top disentangled layer, whose speaker head feeds the decoder.
    pub top: usize,
    pub hidden: Vec<Tensor<f32>>,
}

impl FrozenInputs {
    pub fn compute(model: &Model<f32>, items: &[(&crate::model::FeatureSequence, &DiarizationLabels)]) -> Result<Self> {
        let layers = model.config.disentangled_layers();
        let (Some(&first), Some(&top)) = (layers.first(), layers.last()) else {
            return Err(Error::Config("model has no disentangled layer to train".into()));
        };
        let mut hidden = Vec::with_capacity(items.len());
        for (f, _) in items {
            let mut tape = Tape::inference();
            let p = model.params.bind(&mut tape);
            let (data, packed) = model.pack_inputs(&[*f])?;
            let h = model.embed_inputs(&mut tape, &p, data, &packed)?;
            let (h, _) = model.encoder_layers(&mut tape, &p, h, &packed, 1..=first - 1, &mut Dropout::off())?;
            hidden.push(Tensor::new(tape.shape(h).to_vec(), tape.value(h).to_vec())?);
        }
        Ok(Self { first, top, hidden })
    }
}

/// Speaker logits (`rows × num_spk`) for the mixtures `idx`, plus the
/// packing of their rows.
fn forward(
    model: &Model<f32>,
    tape: &mut Tape<f32>,
    p: &[Var],
    cache: &FrozenInputs,
    idx: &[usize],
) -> Result<(Var, Packed)> {
    let lengths: Vec<usize> = idx.iter().map(|&i| cache.hidden[i].rows()).collect();
    let packed = Packed::from_lengths(&lengths);
    let data: Vec<f32> = idx.iter().flat_map(|&i| cache.hidden[i].data().iter().copied()).collect();
    let h = tape.constant(vec![packed.rows(), model.config.d_model], data)?;
    let (_, tracks) = model.encoder_layers(tape, p, h, &packed, cache.first..=cache.top, &mut Dropout::off())?;
    let track = tracks[cache.top - cache.first][model.config.speaker_head - 1];
    Ok((model.diar_logits(tape, p, track)?, packed))
}

/// Thresholded speaker activity of every mixture.
pub fn predict_activity(
    model: &Model<f32>,
    cache: &FrozenInputs,
    threshold: f64,
    frame_shift_s: f64,
) -> Result<Vec<DiarizationLabels>> {
    let s = model.num_speakers().ok_or_else(|| Error::Config("model has no diarization head".into()))?;
    let mut out = Vec::with_capacity(cache.hidden.len());
    for i in 0..cache.hidden.len() {
        let mut tape = Tape::inference();
        let p = model.params.bind(&mut tape);
        let (logits, packed) = forward(model, &mut tape, &p, cache, &[i])?;
        let v = tape.value(logits);
        let logit_threshold = (threshold / (1.0 - threshold)).ln();
        let activity = (0..s)
            .map(|k| (0..packed.rows()).map(|t| v[t * s + k] as f64 > logit_threshold).collect())
            .collect();
        out.push(DiarizationLabels::new(activity, frame_shift_s)?);
    }
    Ok(out)
}

pub fn score_activity(refs: &[&DiarizationLabels], hyps: &[DiarizationLabels], cfg: &DiarConfig) -> Result<DerCounts> {
    let mut c = DerCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        c = c.merge(&der_counts(r, h, cfg.collar_s, cfg.median_window)?);
    }
    Ok(c)
}

pub struct DiarRun {
    pub model: Model<f32>,
    pub report: RunReport,
    /// Pooled DER counts on each evaluated split after the last epoch.
    pub final_counts: Vec<(String, DerCounts)>,
}

/// Trains the disentangled layers and a linear speaker decoder on top of a
/// frozen ASR encoder.
pub fn train_diar_model(
    cfg: &ExperimentConfig,
    asr_model: &Model<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<DiarRun> {
    let started = Instant::now();
    let dc = &cfg.diar;
    let items = diar_items(train)?;
    if items.is_empty() {
        return Err(Error::Input("diarization training split is empty".into()));
    }
    let num_spk = items.iter().map(|(_, l)| l.num_spk()).max().unwrap_or(0);
    if items.iter().any(|(_, l)| l.num_spk() != num_spk) {
        return Err(Error::Input("mixtures disagree on the number of speakers".into()));
    }
    let mut model = asr_model.clone();
    if model.config.disentangled_layers().is_empty() {
        return Err(Error::Config("checkpoint has no disentangled layer to train".into()));
    }
    let seed = cfg.train.seed;
    model.add_diar_head(num_spk, derive_rng(seed, HEAD_TAG, 0).random::<u64>());
    let trainable: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| model.diar_trainable(n))
        .collect();
    model.params.set_trainable(|n| trainable.iter().any(|t| t == n));

    let cache = FrozenInputs::compute(&model, &items)?;
    let test_items = test.map(diar_items).transpose()?;
    let test_cache = test_items.as_ref().map(|t| FrozenInputs::compute(&model, t)).transpose()?;
    let shift = train.manifest.frame_shift_s;

    let mut adam = AdamState::with_hyper(model.params.tensors(), cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
    let mut report = RunReport {
        task: "diar".into(),
        config_hash: cfg.hash()?,
        seed,
        epochs: Vec::new(),
        best_epoch: None,
        der: Vec::new(),
        trainable_params: model.params.trainable_count(),
        total_params: model.params.total_count(),
        wall_clock_s: 0.0,
    };
    let mut final_counts = Vec::new();
    for epoch in 1..=dc.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut derive_rng(seed, SHUFFLE_TAG, epoch as u64));
        let (mut sum, mut n, mut first) = (0.0, 0, f64::NAN);
        let mut steps = 0;
        for idx in order.chunks(dc.batch_size) {
            let step = adam.step + 1;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let (logits, packed) = forward(&model, &mut tape, &p, &cache, idx).map_err(|e| at_step(e, epoch, step))?;
            let mut terms = Vec::with_capacity(idx.len());
            let mut batch_loss = 0.0;
            for (j, &i) in idx.iter().enumerate() {
                let (l, _) = pit_bce_tape(&mut tape, logits, &packed.valid_rows(j), items[i].1)?;
                batch_loss += tape.item(l) as f64;
                terms.push(l);
            }
            let total = tape.add_n(&terms)?;
            let total = tape.scale(total, 1.0 / idx.len() as f32);
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("diarization loss is {batch_loss} at epoch {epoch}, step {step}")));
            }
            if steps == 0 {
                first = batch_loss / idx.len() as f64;
            }
            let grads = tape.backward(total)?;
            model.params.zero_grads();
            for (v, t) in p.iter().zip(model.params.tensors_mut()) {
                if t.requires_grad() {
                    grads.accumulate_into(*v, t);
                }
            }
            adam.step(model.params.tensors_mut(), dc.lr)?;
            sum += batch_loss;
            n += idx.len();
            steps += 1;
        }
        model.params.zero_grads();
        let er = EpochReport {
            epoch,
            steps,
            train_loss: sum / n as f64,
            train: None,
            dev: None,
            first_step_loss: first,
            ctc_skipped: 0,
        };
        log::info!("diar epoch {epoch}: pit {:.4}", er.train_loss);
        report.epochs.push(er);
        if dc.report_epochs.contains(&epoch) || epoch == dc.epochs {
            final_counts.clear();
            let refs: Vec<&DiarizationLabels> = items.iter().map(|x| x.1).collect();
            let hyps = predict_activity(&model, &cache, dc.threshold, shift)?;
            final_counts.push(("train".to_string(), score_activity(&refs, &hyps, dc)?));
            if let (Some(ti), Some(tc)) = (&test_items, &test_cache) {
                let refs: Vec<&DiarizationLabels> = ti.iter().map(|x| x.1).collect();
                let hyps = predict_activity(&model, tc, dc.threshold, shift)?;
                final_counts.push(("test".to_string(), score_activity(&refs, &hyps, dc)?));
            }
            if dc.report_epochs.contains(&epoch) {
                for (split, c) in &final_counts {
                    let der = c.breakdown(shift).der;
                    log::info!("diar epoch {epoch}: {split} DER {der:.4}");
                    report.der.push(DerPoint {
                        epoch,
                        split: split.clone(),
                        der,
                    });
                }
            }
        }
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(DiarRun {
        model,
        report,
        final_counts,
    })
}

/// `train-diar`: loads an ASR checkpoint and trains on `<data>/train`,
/// scoring `<data>/test` when present.
pub fn cmd_train_diar(
    cfg: &ExperimentConfig,
    asr_checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<RunReport> {
    cfg.validate()?;
    let records = checkpoint::read(asr_checkpoint)?;
    let mut model = Model::<f32>::new(cfg.effective_model())?;
    model.load_records(&records)?;
    let train = read_dataset(&data_dir.join(Split::Train.name()))?;
    let test_dir = data_dir.join(Split::Test.name());
    let test = if test_dir.exists() { Some(read_dataset(&test_dir)?) } else { None };
    prepare_out_dir(out_dir, force)?;
    write_config(out_dir, cfg)?;
    let run = train_diar_model(cfg, &model, &train, test.as_ref())?;
    checkpoint::write(&out_dir.join(DIAR_CHECKPOINT), &run.model.to_records())?;
    write_json(&out_dir.join(REPORT_FILE), &run.report)?;
    Ok(run.report)
}

/// Loads a diarization checkpoint written by [`cmd_train_diar`].
pub fn load_diar_model(path: &Path) -> Result<(ExperimentConfig, Model<f32>)> {
    let (cfg, model) = load_model(path)?;
    if !model.has_diar_head() {
        return Err(Error::Config(format!("{} holds no diarization head", path.display())));
    }
    Ok((cfg, model))
}
