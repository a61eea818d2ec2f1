use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fisher_separability, pca_project, temporal_step_norms, ProbeRecord};
use crate::model::{EncoderOutput, Model};
use crate::synth::{read_dataset, Dataset};

use super::report::{write_json, write_jsonl};
use super::state::load_model;

const PROBE_BATCH: usize = 16;

/// PCA coordinates of one head's frames with their speaker ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub layer: usize,
    pub head: usize,
    pub explained: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub speakers: Vec<usize>,
}

/// Speaker of each frame; frames with no or several active speakers are
/// `None`.
fn frame_speakers(ds: &Dataset, i: usize) -> Vec<Option<usize>> {
    let r = &ds.manifest.records[i];
    match &r.labels {
        None => vec![r.speakers.first().copied(); r.frames],
        Some(l) => (0..l.frames())
            .map(|t| {
                let active: Vec<usize> = (0..l.num_spk()).filter(|&k| l.activity[k][t]).collect();
                match active.as_slice() {
                    [k] => r.speakers.get(*k).copied(),
                    _ => None,
                }
            })
            .collect(),
    }
}

pub fn check_indices(model: &Model<f32>, layers: &[usize], heads: &[usize]) -> Result<()> {
    let c = &model.config;
    if layers.is_empty() || heads.is_empty() {
        return Err(Error::Config("probe needs at least one layer and one head".into()));
    }
    for &l in layers {
        if l == 0 || l > c.enc_layers {
            return Err(Error::Bounds {
                op: "probe layer",
                index: l,
                extent: c.enc_layers,
            });
        }
    }
    for &h in heads {
        if h == 0 || h > c.num_heads {
            return Err(Error::Bounds {
                op: "probe head",
                index: h,
                extent: c.num_heads,
            });
        }
    }
    Ok(())
}

/// Smoothness and separability of each requested `(layer, head)`, both 1-based.
pub fn probe_model(
    model: &Model<f32>,
    ds: &Dataset,
    layers: &[usize],
    heads: &[usize],
    with_projection: bool,
) -> Result<(Vec<ProbeRecord>, Vec<ProjectionRecord>)> {
    check_indices(model, layers, heads)?;
    if ds.is_empty() {
        return Err(Error::Input("cannot probe an empty split".into()));
    }
    let mut outputs: Vec<EncoderOutput<f32>> = Vec::with_capacity(ds.len());
    for chunk in ds.features.chunks(PROBE_BATCH) {
        let refs: Vec<_> = chunk.iter().collect();
        outputs.extend(model.encoder_forward(&refs)?);
    }
    let spk: Vec<Vec<Option<usize>>> = (0..ds.len()).map(|i| frame_speakers(ds, i)).collect();
    let d = model.config.head_dim;
    let mut records = Vec::new();
    let mut projections = Vec::new();
    for &l in layers {
        for &h in heads {
            let (mut step_sum, mut steps, mut n_frames) = (0.0, 0usize, 0usize);
            let (mut frames, mut labels) = (Vec::new(), Vec::new());
            for (out, s) in outputs.iter().zip(&spk) {
                let e = out.head_embeddings(l, h)?;
                let valid: Vec<f64> = e
                    .data()
                    .chunks(d)
                    .zip(&out.valid)
                    .filter(|(_, &v)| v)
                    .flat_map(|(row, _)| row.iter().map(|&x| x as f64))
                    .collect();
                let norms = temporal_step_norms(&valid, d)?;
                step_sum += norms.iter().sum::<f64>();
                steps += norms.len();
                n_frames += valid.len() / d;
                for (row, who) in valid.chunks(d).zip(s) {
                    if let Some(k) = who {
                        frames.extend_from_slice(row);
                        labels.push(*k);
                    }
                }
            }
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let fisher = if distinct.len() >= 2 {
                Some(fisher_separability(&frames, d, &labels)?)
            } else {
                None
            };
            if with_projection && labels.len() >= 2 {
                let p = pca_project(&frames, d, 2.min(d))?;
                let points = p
                    .coords
                    .chunks(p.out_dim)
                    .map(|c| [c[0], c.get(1).copied().unwrap_or(0.0)])
                    .collect();
                projections.push(ProjectionRecord {
                    layer: l,
                    head: h,
                    explained: p.explained,
                    points,
                    speakers: labels.clone(),
                });
            }
            records.push(ProbeRecord {
                layer: l,
                head: h,
                smoothness: if steps > 0 { step_sum / steps as f64 } else { 0.0 },
                fisher,
                n_frames,
            });
        }
    }
    Ok((records, projections))
}

/// `probe`: writes one JSON line per `(layer, head)` to `out`, and the PCA
/// coordinates to `projection` when given.
pub fn cmd_probe(
    checkpoint: &Path,
    data_dir: &Path,
    layers: &[usize],
    heads: &[usize],
    out: &Path,
    projection: Option<&Path>,
) -> Result<Vec<ProbeRecord>> {
    let (_, model) = load_model(checkpoint)?;
    let ds = read_dataset(data_dir)?;
    let (records, proj) = probe_model(&model, &ds, layers, heads, projection.is_some())?;
    write_jsonl(out, &records)?;
    if let Some(p) = projection {
        write_json(p, &proj)?;
    }
    Ok(records)
}
