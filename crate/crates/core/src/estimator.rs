//! Integer step estimates from network outputs, and per-patch metrics.

use thiserror::Error;

use crate::jpeg::QTarget;
use crate::nn::{patch_tensor, DenseNet, NnError, Tensor};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("length mismatch: estimate has {estimate} entries, truth has {truth}")]
    Length { estimate: usize, truth: usize },
    #[error("no patches to aggregate")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Raw network outputs and their rounded, positive integer form.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub raw: Vec<f64>,
    pub rounded: Vec<u16>,
}

impl Estimate {
    /// Rounds each entry independently, half up, clamped to `[1, 65535]`.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let rounded = raw.iter().map(|&v| round_step(v)).collect();
        Self { raw, rounded }
    }

    pub fn nc(&self) -> usize {
        self.raw.len()
    }
}

/// Nearest integer with ties rounded up, clamped to a valid step.
pub fn round_step(v: f64) -> u16 {
    if v.is_nan() {
        return 1;
    }
    (v + 0.5).floor().clamp(1.0, f64::from(u16::MAX)) as u16
}

/// Error and exact-match rate of one rounded estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMetrics {
    pub mse: f64,
    pub acc: f64,
}

pub fn patch_metrics(est: &Estimate, truth: &QTarget) -> Result<PatchMetrics, EstimatorError> {
    if est.nc() != truth.nc() {
        return Err(EstimatorError::Length {
            estimate: est.nc(),
            truth: truth.nc(),
        });
    }
    let nc = truth.nc() as f64;
    let mut sq = 0.0;
    let mut hits = 0usize;
    for (&e, &t) in est.rounded.iter().zip(truth.values()) {
        let d = f64::from(e) - f64::from(t);
        sq += d * d;
        hits += usize::from(e == t);
    }
    Ok(PatchMetrics {
        mse: sq / nc,
        acc: hits as f64 / nc,
    })
}

/// Fraction of patches whose `i`-th estimate equals the truth, for every `i`.
pub fn per_coefficient_accuracy(
    estimates: &[Estimate],
    truths: &[QTarget],
) -> Result<Vec<f64>, EstimatorError> {
    if estimates.is_empty() {
        return Err(EstimatorError::Empty);
    }
    if estimates.len() != truths.len() {
        return Err(EstimatorError::Length {
            estimate: estimates.len(),
            truth: truths.len(),
        });
    }
    let nc = truths[0].nc();
    let mut hits = vec![0usize; nc];
    for (e, t) in estimates.iter().zip(truths) {
        if e.nc() != nc || t.nc() != nc {
            return Err(EstimatorError::Length {
                estimate: e.nc(),
                truth: t.nc(),
            });
        }
        for (h, (&a, &b)) in hits.iter_mut().zip(e.rounded.iter().zip(t.values())) {
            *h += usize::from(a == b);
        }
    }
    let n = estimates.len() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

/// Splits an `[N, nc]` output tensor into per-patch estimates.
pub fn estimates_from_output(output: &Tensor<f32>) -> Result<Vec<Estimate>, EstimatorError> {
    let (_, nc) = output.dims2()?;
    Ok(output
        .data()
        .chunks_exact(nc)
        .map(|row| Estimate::from_raw(row.iter().map(|&v| f64::from(v)).collect()))
        .collect())
}

/// Eval-mode estimate for one 64×64×3 patch (interleaved RGB samples).
pub fn estimate(model: &DenseNet<f32>, pixels: &[u8]) -> Result<Estimate, EstimatorError> {
    let mut est = estimate_batch(model, &[pixels])?;
    Ok(est.pop().expect("one patch in, one estimate out"))
}

/// Eval-mode estimates for several patches in one forward pass.
pub fn estimate_batch(model: &DenseNet<f32>, patches: &[&[u8]]) -> Result<Vec<Estimate>, EstimatorError> {
    let output = model.predict(patch_tensor(patches)?)?;
    estimates_from_output(&output)
}
