use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::DiarizationLabels;
use crate::perm::permutations;

pub const DEFAULT_MEDIAN_WINDOW: usize = 11;
pub const MAX_SCORED_SPEAKERS: usize = 4;

/// Majority vote over a centred window that shrinks symmetrically near the
/// ends, so every frame sees an odd number of neighbours.
pub fn median_filter(track: &[bool], window: usize) -> Result<Vec<bool>> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("median window must be odd, got {window}")));
    }
    let n = track.len();
    let half = window / 2;
    let mut prefix = vec![0usize; n + 1];
    for (t, &a) in track.iter().enumerate() {
        prefix[t + 1] = prefix[t] + usize::from(a);
    }
    Ok((0..n)
        .map(|t| {
            let r = half.min(t).min(n - 1 - t);
            let ones = prefix[t + r + 1] - prefix[t - r];
            2 * ones > 2 * r + 1
        })
        .collect())
}

fn rows_padded(l: &DiarizationLabels, n: usize) -> Vec<Vec<bool>> {
    let mut rows = l.activity.clone();
    rows.resize(n, vec![false; l.frames()]);
    rows
}

fn disagreement(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// `mapping[k]` is the hypothesis row paired with reference speaker `k`.
/// Both sides are padded with silent rows to a common speaker count.
pub fn best_permutation_mapping(reference: &DiarizationLabels, hypothesis: &DiarizationLabels) -> Result<Vec<usize>> {
    if reference.frames() != hypothesis.frames() {
        return Err(Error::contract(format!(
            "reference has {} frames, hypothesis {}",
            reference.frames(),
            hypothesis.frames()
        )));
    }
    let n = reference.num_spk().max(hypothesis.num_spk());
    if n > MAX_SCORED_SPEAKERS {
        return Err(Error::contract(format!("at most {MAX_SCORED_SPEAKERS} speakers can be scored, got {n}")));
    }
    let (r, h) = (rows_padded(reference, n), rows_padded(hypothesis, n));
    let cost: Vec<Vec<usize>> = (0..n).map(|k| (0..n).map(|j| disagreement(&r[k], &h[j])).collect()).collect();
    let mut best: Option<(usize, Vec<usize>)> = None;
    for p in permutations(n) {
        let c: usize = p.iter().enumerate().map(|(k, &j)| cost[k][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, p));
        }
    }
    Ok(best.map(|b| b.1).unwrap_or_default())
}

/// Frame tallies behind a DER value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DerCounts {
    pub missed: usize,
    pub false_alarm: usize,
    pub confusion: usize,
    /// Reference speaker-frames (a frame with two speakers counts twice).
    pub speech: usize,
}

impl DerCounts {
    pub fn merge(&self, o: &DerCounts) -> DerCounts {
        DerCounts {
            missed: self.missed + o.missed,
            false_alarm: self.false_alarm + o.false_alarm,
            confusion: self.confusion + o.confusion,
            speech: self.speech + o.speech,
        }
    }

    pub fn breakdown(&self, frame_shift_s: f64) -> DerBreakdown {
        let err = self.missed + self.false_alarm + self.confusion;
        let der = match (err, self.speech) {
            (_, s) if s > 0 => err as f64 / s as f64,
            (0, _) => 0.0,
            _ => f64::INFINITY,
        };
        DerBreakdown {
            missed_s: self.missed as f64 * frame_shift_s,
            false_alarm_s: self.false_alarm as f64 * frame_shift_s,
            confusion_s: self.confusion as f64 * frame_shift_s,
            total_speech_s: self.speech as f64 * frame_shift_s,
            der,
        }
    }
}

/// `der` is the error ratio of the frame counts; it is infinite when there
/// is no reference speech but the hypothesis has activity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub missed_s: f64,
    pub false_alarm_s: f64,
    pub confusion_s: f64,
    pub total_speech_s: f64,
    pub der: f64,
}

/// Frames within `collar` frames of a reference onset or offset.
fn collar_mask(reference: &DiarizationLabels, collar: usize) -> Vec<bool> {
    let n = reference.frames();
    let mut skip = vec![false; n];
    if collar == 0 {
        return skip;
    }
    for row in &reference.activity {
        for b in 0..=n {
            let before = b > 0 && row[b - 1];
            let after = b < n && row[b];
            if before != after {
                let lo = b.saturating_sub(collar);
                let hi = (b + collar).min(n);
                skip[lo..hi].iter_mut().for_each(|s| *s = true);
            }
        }
    }
    skip
}

/// Per scored frame, with `nr` reference speakers, `nh` hypothesis speakers
/// and `nc` of them matched under the speaker mapping:
/// miss = max(0, nr - nh), false alarm = max(0, nh - nr),
/// confusion = min(nr, nh) - nc.
pub fn der_counts(
    reference: &DiarizationLabels,
    hypothesis: &DiarizationLabels,
    collar_s: f64,
    median_window: usize,
) -> Result<DerCounts> {
    if !(collar_s >= 0.0) {
        return Err(Error::Config(format!("collar must be >= 0, got {collar_s}")));
    }
    let filtered = DiarizationLabels {
        activity: hypothesis
            .activity
            .iter()
            .map(|r| median_filter(r, median_window))
            .collect::<Result<_>>()?,
        frame_shift_s: hypothesis.frame_shift_s,
    };
    let map = best_permutation_mapping(reference, &filtered)?;
    let n = map.len();
    let (r, h) = (rows_padded(reference, n), rows_padded(&filtered, n));
    let collar = if reference.frame_shift_s > 0.0 {
        (collar_s / reference.frame_shift_s).round() as usize
    } else {
        0
    };
    let skip = collar_mask(reference, collar);
    let mut c = DerCounts::default();
    for t in 0..reference.frames() {
        if skip[t] {
            continue;
        }
        let nr = (0..n).filter(|&k| r[k][t]).count();
        let nh = (0..n).filter(|&j| h[j][t]).count();
        let nc = (0..n).filter(|&k| r[k][t] && h[map[k]][t]).count();
        c.missed += nr.saturating_sub(nh);
        c.false_alarm += nh.saturating_sub(nr);
        c.confusion += nr.min(nh) - nc;
        c.speech += nr;
    }
    Ok(c)
}

pub fn der(
    reference: &DiarizationLabels,
    hypothesis: &DiarizationLabels,
    collar_s: f64,
    median_window: usize,
) -> Result<DerBreakdown> {
    Ok(der_counts(reference, hypothesis, collar_s, median_window)?.breakdown(reference.frame_shift_s))
}

pub fn speaker_error_time(b: &DerBreakdown) -> f64 {
    b.confusion_s
}
