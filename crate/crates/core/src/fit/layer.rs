use serde::{Deserialize, Serialize};

use crate::calib::CalibCache;
use crate::codec::PackedSignMask;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::adam::{cosine_lr, AdamConfig, AdamW};
use super::objective::LayerObjective;
use super::ScaleMode;

/// Default minibatch: the rows of one default calibration batch (4 × 16).
/// Whole-shard batches give only one Adam step per epoch, which is too few
/// to settle near the optimum.
pub const MINIBATCH_ROWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub cosine: bool,
    /// `None` means [`MINIBATCH_ROWS`].
    pub minibatch_rows: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 5,
            cosine: true,
            minibatch_rows: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.minibatch_rows == Some(0) {
            return Err(Error::Config("minibatch rows must be at least 1".into()));
        }
        Ok(())
    }

    fn batch_rows(&self) -> usize {
        self.minibatch_rows.unwrap_or(MINIBATCH_ROWS)
    }
}

/// A trained scale vector, still in FP32.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub mode: ScaleMode,
    pub values: Vec<f32>,
    /// Mean minibatch loss per epoch.
    pub train_curve: Vec<f64>,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Trains `v` from `init` to match the cached teacher outputs, with `base`
/// and `mask` frozen. Minibatches are taken in row order.
pub fn fit_layer_vector(
    cache: &CalibCache,
    base: &Matrix,
    mask: &PackedSignMask,
    mode: ScaleMode,
    init: &[f32],
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let train = LayerObjective::new(&cache.x_train, &cache.y_train, base, mask, mode)?;
    let val = LayerObjective::new(&cache.x_val, &cache.y_val, base, mask, mode)?;
    if init.len() != train.param_len() {
        return Err(Error::Dimension {
            op: "fit init",
            lhs: mask.shape(),
            rhs: (init.len(), 1),
        });
    }
    let mut v = init.to_vec();
    let mut opt = AdamW::new(cfg.adam, v.len());
    let rows = train.rows();
    let batch = cfg.batch_rows().min(rows).max(1);
    let steps_per_epoch = rows.div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for start in (0..rows).step_by(batch) {
            let end = (start + batch).min(rows);
            let (loss, grad) = train.loss_and_grad(&v, start..end)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            let lr = if cfg.cosine {
                cosine_lr(cfg.adam.lr as f64, step, total_steps)
            } else {
                cfg.adam.lr as f64
            };
            opt.step(&mut v, &grad, lr);
            epoch_loss += loss * (end - start) as f64;
            step += 1;
        }
        curve.push(epoch_loss / rows as f64);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    let train_mse = train.loss(&v)?;
    let val_mse = val.loss(&v)?;
    if !train_mse.is_finite() || !val_mse.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs.saturating_sub(1),
            loss: train_mse,
        });
    }
    Ok(FitOutcome {
        mode,
        values: v,
        train_curve: curve,
        train_mse,
        val_mse,
    })
}
