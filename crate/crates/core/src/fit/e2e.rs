//! Joint refinement of every installed scale vector against the teacher's
//! logits. Masks and base weights stay frozen; gradients reach the scales
//! through `∂L/∂v = Σ ∂L/∂Ŵ ⊙ B` along the patch axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerId, ProjGrads, TokenBatch, ToyModel};
use crate::tensor::Matrix;

use super::adam::{AdamConfig, AdamW};
use super::end_loss::{end_loss, TeacherLogits};
use super::student::{CompressedStudent, LayerPatch};
use super::ScaleMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2EConfig {
    /// Learning rate defaults to 1e-5; at 1e-4 a single pass overshoots.
    pub adam: AdamConfig,
    /// Passes over the end-to-end batches.
    pub epochs: usize,
    /// Number of end-to-end calibration batches.
    pub batches: usize,
}

impl Default for E2EConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-5,
                ..AdamConfig::default()
            },
            epochs: 1,
            batches: 150,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2EOutcome {
    /// Training end loss before any step.
    pub initial_loss: f64,
    /// Training end loss of the returned student.
    pub final_loss: f64,
    /// Training end loss after each epoch, before any rollback.
    pub epoch_losses: Vec<f64>,
}

/// Projects a weight gradient onto a patch's scale parameters.
pub fn scale_gradients(patch: &LayerPatch, dw: &Matrix) -> Vec<f64> {
    let (d_out, d_in) = patch.mask.shape();
    let mut g = vec![0.0f64; patch.values.len()];
    for i in 0..d_out {
        let bits = patch.mask.row_bytes(i);
        let row = dw.row(i);
        let mut row_acc = 0.0f64;
        for j in 0..d_in {
            let v = row[j] as f64;
            let signed = if bits[j >> 3] >> (j & 7) & 1 == 1 { v } else { -v };
            match patch.mode {
                ScaleMode::Col => g[j] += signed,
                _ => row_acc += signed,
            }
        }
        match patch.mode {
            ScaleMode::Row => g[i] = row_acc,
            ScaleMode::Scalar => g[0] += row_acc,
            ScaleMode::Col => {}
        }
    }
    g
}

/// Gradient of `‖ℓ(student) − ℓ*‖²` for one batch, per projection weight.
fn batch_grads(model: &ToyModel, batch: &TokenBatch, target: &Matrix) -> Result<(f64, ProjGrads)> {
    let (logits, trace) = model.forward_traced(batch)?;
    let diff = logits.sub(target)?;
    let loss = diff.sum_sq();
    let grads = model.backward(&trace, &diff.scale(2.0))?;
    Ok((loss, grads))
}

/// Adam over all scale vectors on `batches`, one step per batch. After each
/// epoch the training end loss is re-evaluated and the epoch is rolled back
/// if it made things worse, so the result never ends above the start.
pub fn e2e_refine(
    student: &mut CompressedStudent,
    teacher: &ToyModel,
    cfg: &E2EConfig,
    batches: &[TokenBatch],
) -> Result<E2EOutcome> {
    if !(cfg.adam.lr > 0.0) {
        return Err(Error::Config("end-to-end learning rate must be positive".into()));
    }
    let targets = TeacherLogits::compute(teacher, batches.to_vec())?;
    let initial_loss = if batches.is_empty() {
        0.0
    } else {
        end_loss(student.model(), &targets)?
    };
    let mut outcome = E2EOutcome {
        initial_loss,
        final_loss: initial_loss,
        epoch_losses: Vec::new(),
    };
    if cfg.epochs == 0 || batches.is_empty() || student.patches().is_empty() {
        return Ok(outcome);
    }

    let ids: Vec<LayerId> = student.patches().keys().copied().collect();
    let offsets: Vec<usize> = ids
        .iter()
        .scan(0, |acc, id| {
            let start = *acc;
            *acc += student.patches()[id].values.len();
            Some(start)
        })
        .collect();
    let mut params: Vec<f32> = ids
        .iter()
        .flat_map(|id| student.patches()[id].values.iter().copied())
        .collect();
    let mut opt = AdamW::new(cfg.adam, params.len());
    let mut best = (initial_loss, params.clone());

    for epoch in 0..cfg.epochs {
        for (batch, target) in targets.batches().iter().zip(targets.logits()) {
            let (loss, grads) = batch_grads(student.model(), batch, target)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let mut flat = vec![0.0f64; params.len()];
            for (id, &off) in ids.iter().zip(&offsets) {
                let g = scale_gradients(&student.patches()[id], &grads[id]);
                flat[off..off + g.len()].copy_from_slice(&g);
            }
            opt.step(&mut params, &flat, cfg.adam.lr as f64);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            install_params(student, &ids, &offsets, &params)?;
        }
        let loss = end_loss(student.model(), &targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        outcome.epoch_losses.push(loss);
        if loss <= best.0 {
            best = (loss, params.clone());
        } else {
            params.clone_from(&best.1);
            install_params(student, &ids, &offsets, &params)?;
        }
    }
    outcome.final_loss = best.0;
    Ok(outcome)
}

fn install_params(
    student: &mut CompressedStudent,
    ids: &[LayerId],
    offsets: &[usize],
    params: &[f32],
) -> Result<()> {
    for (id, &off) in ids.iter().zip(offsets) {
        let len = student.patches()[id].values.len();
        student.set_values(*id, &params[off..off + len])?;
    }
    Ok(())
}
