//! The layer-serial baseline: forward pass, full backward gradient
//! propagation, SGD parameter updates. Single-threaded by contract; this is
//! the timing and accuracy reference every parallel mode is compared against.

use crate::data::{epoch_batches, AugmentPolicy, Dataset};
use crate::model::{loss_phi, net_backward, net_forward, ResidualModel};
use crate::optim::{sgd_update, Momentum, SgdConfig};
use crate::tensor::Tensor;
use crate::Result;
use std::time::Instant;

/// Per-epoch result of the serial trainer.
#[derive(Debug, Clone)]
pub struct SerialEpochReport {
    /// Sample-weighted mean training loss over the epoch's batches.
    pub mean_loss: f64,
    /// Training accuracy from the pre-update logits of each batch.
    pub accuracy: f64,
    pub t_data: f64,
    pub t_forward: f64,
    pub t_backward: f64,
    pub wall: f64,
}

pub fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        // total_cmp keeps this well-defined even on a diverged (NaN) row;
        // divergence itself is reported through the loss check.
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap();
        hits += usize::from(argmax == label);
    }
    hits as f64 / labels.len().max(1) as f64
}

/// Loss and accuracy of a full forward pass, no parameter changes.
pub fn evaluate(model: &ResidualModel, features: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let (logits, _) = net_forward(model, features)?;
    let (loss, _) = loss_phi(&logits, labels)?;
    Ok((loss, accuracy_of(&logits, labels)))
}

/// One shuffled pass over `subset`: per batch, forward, loss, full backward
/// sweep, and an SGD update of every parameter (input and output maps
/// included).
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_serial(
    model: &mut ResidualModel,
    momentum_state: &mut Momentum,
    ds: &Dataset,
    subset: &[usize],
    policy: &AugmentPolicy,
    cfg: &SgdConfig,
    epoch: usize,
    lr: f64,
    epoch_seed: u64,
) -> Result<SerialEpochReport> {
    cfg.validate()?;
    let wall_start = Instant::now();
    let t0 = Instant::now();
    let batches = epoch_batches(ds, subset, policy, epoch, cfg.batch_size, epoch_seed)?;
    let t_data = t0.elapsed().as_secs_f64();
    let (mut t_forward, mut t_backward) = (0.0, 0.0);
    let (mut loss_sum, mut hit_sum, mut n) = (0.0, 0.0, 0usize);

    for batch in &batches {
        let t = Instant::now();
        let (logits, traj) = net_forward(model, &batch.features)?;
        t_forward += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (loss, d_logits) = loss_phi(&logits, &batch.labels)?;
        let grads = net_backward(model, &traj, &d_logits)?;
        sgd_update(
            &mut model.tensors_mut(),
            &grads.tensors(),
            lr,
            cfg.momentum,
            momentum_state,
        )?;
        t_backward += t.elapsed().as_secs_f64();

        let b = batch.labels.len();
        loss_sum += loss * b as f64;
        hit_sum += accuracy_of(&logits, &batch.labels) * b as f64;
        n += b;
    }
    Ok(SerialEpochReport {
        mean_loss: loss_sum / n as f64,
        accuracy: hit_sum / n as f64,
        t_data,
        t_forward,
        t_backward,
        wall: wall_start.elapsed().as_secs_f64(),
    })
}
