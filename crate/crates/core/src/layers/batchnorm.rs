//! Batch normalization.
//!
//! Training normalizes with the batch mean and biased variance; the running
//! variance is updated with the unbiased estimate. Gradients flow through the
//! batch statistics.

use super::{Mode, ParamBindings};
use crate::autodiff::{GroupStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Exponentially averaged per-channel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub num_batches_seen: u64,
}

impl NormStats {
    /// Mean 0, variance 1, nothing seen.
    pub fn new(channels: usize) -> Self {
        NormStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            num_batches_seen: 0,
        }
    }

    pub fn from_parts(running_mean: Vec<f64>, running_var: Vec<f64>, num_batches_seen: u64) -> Self {
        NormStats {
            running_mean,
            running_var,
            num_batches_seen,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds in one batch's mean and biased variance over `count` elements.
    pub(crate) fn update(&mut self, mean: &[f64], biased_var: &[f64], count: usize, momentum: f64) {
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - momentum) * self.running_mean[c] + momentum * mean[c];
            let unbiased = biased_var[c] * correction;
            self.running_var[c] = (1.0 - momentum) * self.running_var[c] + momentum * unbiased;
        }
        self.num_batches_seen += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: NormStats,
    pub momentum: f64,
    pub eps: f64,
}

/// Output of a normalization layer along with its pre-affine values.
#[derive(Debug, Clone, Copy)]
pub struct NormOutput {
    pub output: Var,
    pub normalized: Var,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            stats: NormStats::new(channels),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        params: &mut ParamBindings,
    ) -> Result<NormOutput> {
        check_channels("batchnorm", tape.shape(x), self.channels())?;
        let normalized = match mode {
            Mode::Train => {
                let rows = tape.shape(x)[0];
                if rows < 2 {
                    return Err(Error::invalid(
                        "batchnorm",
                        format!("training needs at least 2 rows, got {rows}"),
                    ));
                }
                let (xhat, stats) = tape.standardize(x, &[(0, rows)], self.eps)?;
                self.stats.update(
                    stats.group_mean(0),
                    stats.group_var(0),
                    stats.count[0],
                    self.momentum,
                );
                xhat
            }
            Mode::Eval => normalize_with_running(tape, x, &self.stats, self.eps)?,
        };
        let output = shared_affine(tape, normalized, &self.gamma, &self.beta, params)?;
        Ok(NormOutput { output, normalized })
    }
}

pub(crate) fn check_channels(op: &'static str, shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: vec![channels],
        });
    }
    Ok(())
}

/// `(x − running_mean) / √(running_var + eps)` per channel.
pub(crate) fn normalize_with_running(
    tape: &mut Tape,
    x: Var,
    stats: &NormStats,
    eps: f64,
) -> Result<Var> {
    let scale: Vec<f64> = stats
        .running_var
        .iter()
        .map(|v| 1.0 / (v + eps).sqrt())
        .collect();
    let shift: Vec<f64> = stats
        .running_mean
        .iter()
        .zip(&scale)
        .map(|(m, s)| -m * s)
        .collect();
    tape.channel_affine(x, &scale, &shift)
}

/// `gamma[c]·x + beta[c]`, broadcasting the parameters over rows and spatial axes.
pub(crate) fn shared_affine(
    tape: &mut Tape,
    x: Var,
    gamma: &Tensor,
    beta: &Tensor,
    params: &mut ParamBindings,
) -> Result<Var> {
    let rank = tape.shape(x).len();
    let mut bshape = vec![1; rank];
    bshape[1] = gamma.len();
    let g = params.bind(tape, gamma);
    let b = params.bind(tape, beta);
    let g = tape.reshape(g, bshape.clone())?;
    let b = tape.reshape(b, bshape)?;
    let scaled = tape.mul(x, g)?;
    tape.add(scaled, b)
}

/// Per-group statistics recomputed from scratch; used by tests as an oracle.
#[doc(hidden)]
pub fn recompute_group_stats(data: &Tensor, groups: &[(usize, usize)]) -> GroupStats {
    let shape = data.shape();
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let row_len = channels * spatial;
    let mut mean = Vec::new();
    let mut var = Vec::new();
    let mut count = Vec::new();
    for &(start, rows) in groups {
        for c in 0..channels {
            let vals: Vec<f64> = (start..start + rows)
                .flat_map(|r| data.data()[r * row_len + c * spatial..][..spatial].to_vec())
                .collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            mean.push(m);
            var.push(vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n);
        }
        count.push(rows * spatial);
    }
    GroupStats {
        channels,
        mean,
        var,
        count,
    }
}
