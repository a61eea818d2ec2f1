use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_rows(data: &[f64], d: usize, what: &'static str) -> Result<usize> {
    if d == 0 || data.len() % d != 0 {
        return Err(Error::Shape {
            op: what,
            lhs: vec![data.len()],
            rhs: vec![d],
        });
    }
    Ok(data.len() / d)
}

/// `‖e_{t+1} - e_t‖ / √d` for each step of a `T×d` track.
pub fn temporal_step_norms(track: &[f64], d: usize) -> Result<Vec<f64>> {
    let t = check_rows(track, d, "temporal_smoothness")?;
    let scale = (d as f64).sqrt();
    Ok((1..t)
        .map(|i| {
            let (a, b) = (&track[(i - 1) * d..i * d], &track[i * d..(i + 1) * d]);
            a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt() / scale
        })
        .collect())
}

pub fn temporal_smoothness(track: &[f64], d: usize) -> Result<f64> {
    let steps = temporal_step_norms(track, d)?;
    if steps.is_empty() {
        return Err(Error::Input("temporal smoothness needs at least 2 frames".into()));
    }
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

/// `tr(S_b) / max(tr(S_w), 1e-12)` with class-size-weighted means.
pub fn fisher_separability(frames: &[f64], d: usize, labels: &[usize]) -> Result<f64> {
    let n = check_rows(frames, d, "fisher_separability")?;
    if labels.len() != n {
        return Err(Error::contract(format!("{n} frames but {} labels", labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut counts = vec![0usize; classes.len()];
    let mut means = vec![vec![0.0; d]; classes.len()];
    let mut global = vec![0.0; d];
    let idx: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    for (row, &c) in frames.chunks(d).zip(&idx) {
        counts[c] += 1;
        for j in 0..d {
            means[c][j] += row[j];
            global[j] += row[j];
        }
    }
    if classes.len() < 2 || counts.iter().any(|&c| c < 2) {
        return Err(Error::Input("separability needs >= 2 classes with >= 2 frames each".into()));
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|x| *x /= c as f64);
    }
    global.iter_mut().for_each(|x| *x /= n as f64);
    let sb: f64 = means
        .iter()
        .zip(&counts)
        .map(|(m, &c)| c as f64 * m.iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let sw: f64 = frames
        .chunks(d)
        .zip(&idx)
        .map(|(row, &c)| row.iter().zip(&means[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok(sb / sw.max(1e-12))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `N×out_dim`, row-major.
    pub coords: Vec<f64>,
    pub out_dim: usize,
    /// Unit-norm principal directions, one `d`-vector each.
    pub components: Vec<Vec<f64>>,
    /// Fraction of the total variance along each component.
    pub explained: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Centred projection onto the leading principal directions, found by power
/// iteration with deflation from fixed starting vectors.
pub fn pca_project(frames: &[f64], d: usize, out_dim: usize) -> Result<Projection> {
    let n = check_rows(frames, d, "pca_project")?;
    if n < 2 {
        return Err(Error::Input("PCA needs at least 2 frames".into()));
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::Input(format!("out_dim {out_dim} must be in 1..={d}")));
    }
    let mut mean = vec![0.0; d];
    for row in frames.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = frames.chunks(d).flat_map(|r| r.iter().zip(&mean).map(|(x, m)| x - m)).collect();
    let mut cov = vec![0.0; d * d];
    for row in centred.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut explained = Vec::new();
    for k in 0..out_dim {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + ((j + k) % d) as f64 / d as f64).collect();
        if orthonormalize(&mut v, &components) < 1e-12 {
            v = vec![0.0; d];
            v[k] = 1.0;
            orthonormalize(&mut v, &components);
        }
        for _ in 0..2000 {
            let mut next: Vec<f64> = (0..d).map(|i| dot(&cov[i * d..(i + 1) * d], &v)).collect();
            if orthonormalize(&mut next, &components) < 1e-300 {
                break;
            }
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            if delta < 1e-15 {
                break;
            }
        }
        let lambda: f64 = (0..d).map(|i| v[i] * dot(&cov[i * d..(i + 1) * d], &v)).sum();
        explained.push(if total > 0.0 { lambda / total } else { 0.0 });
        components.push(v);
    }
    let coords = centred
        .chunks(d)
        .flat_map(|r| components.iter().map(move |c| dot(r, c)))
        .collect();
    Ok(Projection {
        coords,
        out_dim,
        components,
        explained,
    })
}
