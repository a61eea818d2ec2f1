use crate::error::{Error, Result};
use crate::grad::{Float, Tensor};

pub const DEFAULT_FRAME_SHIFT_S: f64 = 0.01;

/// `T × d_feat` frames plus a validity mask; invalid (padded) frames never
/// influence valid outputs or losses.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor<f32>,
    pub frame_shift_s: f64,
    pub pad_mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Shape {
                op: "feature_sequence",
                lhs: frames.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let t = frames.rows();
        Ok(Self {
            frames,
            frame_shift_s: DEFAULT_FRAME_SHIFT_S,
            pad_mask: vec![true; t],
        })
    }

    /// `pad_mask[t]` is `true` for real frames.
    pub fn with_mask(frames: Tensor<f32>, pad_mask: Vec<bool>) -> Result<Self> {
        let mut s = Self::new(frames)?;
        if pad_mask.len() != s.len() {
            return Err(Error::Shape {
                op: "feature_sequence",
                lhs: vec![s.len()],
                rhs: vec![pad_mask.len()],
            });
        }
        s.pad_mask = pad_mask;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn valid_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&v| v).count()
    }

    /// Appends `extra` padded frames filled with `value`.
    pub fn padded(&self, extra: usize, value: f32) -> Self {
        let d = self.dim();
        let mut data = self.frames.data().to_vec();
        data.extend(std::iter::repeat_n(value, extra * d));
        let mut mask = self.pad_mask.clone();
        mask.extend(std::iter::repeat_n(false, extra));
        Self {
            frames: Tensor::new(vec![self.len() + extra, d], data).expect("consistent"),
            frame_shift_s: self.frame_shift_s,
            pad_mask: mask,
        }
    }
}

/// Global mean/variance normalization of input features, estimated on the
/// training split and stored with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl FeatureNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            inv_std: vec![1.0; d],
        }
    }

    pub fn estimate<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>, d: usize) -> Self {
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for s in seqs {
            for (t, row) in s.frames.data().chunks(d).enumerate() {
                if !s.pad_mask[t] {
                    continue;
                }
                for j in 0..d {
                    let x = row[j] as f64;
                    sum[j] += x;
                    sq[j] += x * x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(d);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (1.0 / (s / nf - m * m).max(1e-10).sqrt()) as f32)
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            inv_std,
        }
    }

    pub fn apply<F: Float>(&self, frames: &Tensor<f32>, out: &mut Vec<F>) {
        let d = self.mean.len();
        for row in frames.data().chunks(d) {
            for j in 0..d {
                out.push(F::of(((row[j] - self.mean[j]) * self.inv_std[j]) as f64));
            }
        }
    }
}

/// Sinusoidal table `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn positional_encoding<F: Float>(len: usize, d_model: usize, max_len: usize) -> Result<Tensor<F>> {
    if len > max_len {
        return Err(Error::Input(format!(
            "sequence length {len} exceeds max_len {max_len}"
        )));
    }
    let mut data = Vec::with_capacity(len * d_model);
    for p in 0..len {
        for j in 0..d_model {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d_model as f64);
            data.push(F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d_model], data)
}
