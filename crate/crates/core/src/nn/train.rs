//! Mini-batch training of the regressor on labelled patches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Backend, Graph};
use super::kernels;
use super::{adam_step, AdamConfig, AdamState, DenseNet, Mode, NnError, Tensor};
use crate::dataset::{PatchRecord, PATCH_CHANNELS, PATCH_SIZE};

/// Regression loss, averaged over batch and coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    LogCosh,
    L2,
}

impl std::str::FromStr for LossKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logcosh" | "log-cosh" => Ok(LossKind::LogCosh),
            "l2" | "mse" => Ok(LossKind::L2),
            other => Err(NnError::Config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    /// Seeds shuffling and dropout.
    pub seed: u64,
    /// Weight of the current batch in the running normalization statistics.
    pub norm_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            adam: AdamConfig::default(),
            loss: LossKind::LogCosh,
            seed: 0,
            norm_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// One-based index within this run.
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses.
    pub train_loss: f64,
    /// Eval-mode loss on the validation set, when one is given.
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
}

/// Stacks patches into a `[N, 3, 64, 64]` tensor with samples scaled to `[0, 1]`.
pub fn batch_inputs(records: &[&PatchRecord]) -> Result<Tensor<f32>, NnError> {
    let pixels: Vec<&[u8]> = records.iter().map(|r| r.pixels.as_slice()).collect();
    patch_tensor(&pixels)
}

/// Interleaved 64×64 RGB patches to a planar `[N, 3, 64, 64]` tensor in `[0, 1]`.
pub fn patch_tensor(patches: &[&[u8]]) -> Result<Tensor<f32>, NnError> {
    let plane = PATCH_SIZE * PATCH_SIZE;
    let per = plane * PATCH_CHANNELS;
    let mut data = vec![0f32; patches.len() * per];
    for (n, px) in patches.iter().enumerate() {
        if px.len() != per {
            return Err(NnError::Shape(format!(
                "patch {n} has {} samples, expected {per} (64x64x3)",
                px.len()
            )));
        }
        let out = &mut data[n * per..(n + 1) * per];
        for (p, rgb) in px.chunks_exact(PATCH_CHANNELS).enumerate() {
            for (c, &v) in rgb.iter().enumerate() {
                out[c * plane + p] = f32::from(v) / 255.0;
            }
        }
    }
    Tensor::new(&[patches.len(), PATCH_CHANNELS, PATCH_SIZE, PATCH_SIZE], data)
}

/// Stacks labels into an `[N, nc]` tensor.
pub fn batch_targets(records: &[&PatchRecord], nc: usize) -> Result<Tensor<f32>, NnError> {
    let mut data = Vec::with_capacity(records.len() * nc);
    for r in records {
        if r.nc() != nc {
            return Err(NnError::NcMismatch {
                labels: r.nc(),
                outputs: nc,
            });
        }
        data.extend(r.label.values().iter().map(|&v| f32::from(v)));
    }
    Tensor::new(&[records.len(), nc], data)
}

fn check_labels(model: &DenseNet<f32>, records: &[PatchRecord]) -> Result<(), NnError> {
    let nc = model.config().nc_outputs;
    match records.iter().find(|r| r.nc() != nc) {
        Some(r) => Err(NnError::NcMismatch {
            labels: r.nc(),
            outputs: nc,
        }),
        None => Ok(()),
    }
}

fn loss_value(kind: LossKind, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64, NnError> {
    match kind {
        LossKind::LogCosh => kernels::log_cosh_loss(pred, target),
        LossKind::L2 => kernels::l2_loss(pred, target),
    }
}

/// Eval-mode mean loss over `records`.
pub fn evaluate_loss(
    model: &DenseNet<f32>,
    records: &[PatchRecord],
    kind: LossKind,
    batch_size: usize,
) -> Result<f64, NnError> {
    if records.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    check_labels(model, records)?;
    let nc = model.config().nc_outputs;
    let mut total = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&PatchRecord> = chunk.iter().collect();
        let pred = model.predict(batch_inputs(&refs)?)?;
        total += loss_value(kind, &pred, &batch_targets(&refs, nc)?)? * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

/// One forward/backward/update step on a mini-batch; returns its loss.
fn train_step(
    model: &mut DenseNet<f32>,
    batch: &[&PatchRecord],
    optimizer: &mut AdamState,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, NnError> {
    let nc = model.config().nc_outputs;
    let mut g = Graph::<f32>::new();
    let out = model.forward(&mut g, batch_inputs(batch)?, Mode::Train(rng))?;
    let target = g.constant(batch_targets(batch, nc)?);
    let loss = match config.loss {
        LossKind::LogCosh => g.log_cosh_loss(out.output, target)?,
        LossKind::L2 => g.l2_loss(out.output, target)?,
    };
    let loss_val = f64::from(g.value(loss).data()[0]);
    if !loss_val.is_finite() {
        return Err(NnError::Config(format!(
            "loss diverged to {loss_val}; lower the learning rate"
        )));
    }
    let mut grads = g.backward(loss)?;
    let grad_tensors: Vec<Tensor<f32>> = out
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    drop(g);
    let grad_refs: Vec<&Tensor<f32>> = grad_tensors.iter().collect();
    let mut param_refs: Vec<&mut Tensor<f32>> =
        model.params_mut().iter_mut().map(|p| &mut p.value).collect();
    adam_step(&mut param_refs, &grad_refs, optimizer, &config.adam)?;
    model.update_running_stats(&out.batch_stats, config.norm_momentum);
    Ok(loss_val)
}

/// Trains `model` in place for `config.epochs` epochs.
///
/// Every epoch reshuffles the training set; the last partial batch is kept.
/// `on_epoch` runs after each epoch with the updated model and optimizer, which
/// is where callers write checkpoints; an error from it aborts training.
pub fn train<F>(
    model: &mut DenseNet<f32>,
    optimizer: &mut AdamState,
    train_set: &[PatchRecord],
    val_set: Option<&[PatchRecord]>,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport, NnError>
where
    F: FnMut(&EpochStats, &DenseNet<f32>, &AdamState) -> Result<(), NnError>,
{
    if train_set.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(NnError::Config("batch size must be positive".into()));
    }
    check_labels(model, train_set)?;
    if let Some(val) = val_set {
        check_labels(model, val)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&PatchRecord> = idx.iter().map(|&i| &train_set[i]).collect();
            weighted += train_step(model, &batch, optimizer, config, &mut rng)? * batch.len() as f64;
            report.steps += 1;
        }
        let val_loss = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate_loss(model, v, config.loss, config.batch_size)?),
            _ => None,
        };
        let stats = EpochStats {
            epoch,
            train_loss: weighted / train_set.len() as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}{} ({:.1}s)",
            stats.train_loss,
            stats
                .val_loss
                .map(|v| format!(", val loss {v:.6}"))
                .unwrap_or_default(),
            stats.seconds
        );
        on_epoch(&stats, model, optimizer)?;
        report.epochs.push(stats);
    }
    Ok(report)
}
