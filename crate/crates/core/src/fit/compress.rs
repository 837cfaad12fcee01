use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{build_cache, build_cache_with, CalibConfig, CalibSource, TeacherOutputs};
use crate::codec::sign_mask;
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::tensor::half::round_through_half;

use super::end_loss::{end_loss, TeacherLogits};
use super::layer::{fit_layer_vector, FitConfig};
use super::objective::init_scale_f32;
use super::student::{CompressedStudent, LayerPatch};
use super::ScaleMode;

/// Criterion for choosing between the row and column candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectBy {
    /// End-to-end loss of the whole student with the candidate installed.
    #[default]
    End,
    /// Layer MSE on the validation shard.
    Layer,
}

impl FromStr for SelectBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end" => Ok(SelectBy::End),
            "layer" => Ok(SelectBy::Layer),
            other => Err(Error::Config(format!(
                "unknown selection criterion {other:?} (expected end|layer)"
            ))),
        }
    }
}

impl fmt::Display for SelectBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectBy::End => "end",
            SelectBy::Layer => "layer",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressConfig {
    pub fit: FitConfig,
    pub select_by: SelectBy,
    /// One scalar per matrix instead of a row/col vector.
    pub scalar_baseline: bool,
    /// Epochs used in scalar mode.
    pub scalar_epochs: usize,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            select_by: SelectBy::End,
            scalar_baseline: false,
            scalar_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateResult {
    pub mode: ScaleMode,
    pub values: Vec<f32>,
    pub train_curve: Vec<f64>,
    pub train_mse: f64,
    pub val_mse: f64,
    pub end_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFitResult {
    pub layer: String,
    pub chosen: ScaleMode,
    pub candidates: Vec<CandidateResult>,
}

impl LayerFitResult {
    pub fn candidate(&self, mode: ScaleMode) -> Option<&CandidateResult> {
        self.candidates.iter().find(|c| c.mode == mode)
    }

    pub fn chosen_candidate(&self) -> &CandidateResult {
        self.candidate(self.chosen).expect("chosen candidate is recorded")
    }
}

/// Compresses one projection of `student` against `teacher`.
///
/// Builds the calibration cache from the current (partially compressed)
/// student, packs `sign(W_f − W_b)`, fits the column and row candidates from
/// mean-|ΔW| starts, scores each with the candidate installed, and leaves
/// the winner installed (ties go to row).
pub fn compress_layer(
    teacher: &ToyModel,
    student: &mut CompressedStudent,
    layer: &str,
    cfg: &CompressConfig,
    calib: &CalibConfig,
    source: &CalibSource,
    val_logits: &TeacherLogits,
) -> Result<LayerFitResult> {
    compress_layer_inner(teacher, None, student, layer, cfg, calib, source, val_logits)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn compress_layer_inner(
    teacher: &ToyModel,
    teacher_out: Option<&TeacherOutputs>,
    student: &mut CompressedStudent,
    layer: &str,
    cfg: &CompressConfig,
    calib: &CalibConfig,
    source: &CalibSource,
    val_logits: &TeacherLogits,
) -> Result<LayerFitResult> {
    let id = student.model().resolve(layer)?;
    let base_w = student.base().proj(id)?.clone();
    let delta = teacher.proj(id)?.sub(&base_w)?;
    let mask = sign_mask(&delta);
    let cache = match teacher_out {
        Some(t) => build_cache_with(t, student.model(), layer, calib, source)?,
        None => build_cache(teacher, student.model(), layer, calib, source)?,
    };

    let (modes, fit_cfg): (&[ScaleMode], FitConfig) = if cfg.scalar_baseline {
        (
            &[ScaleMode::Scalar],
            FitConfig {
                epochs: cfg.scalar_epochs,
                ..cfg.fit
            },
        )
    } else {
        (&[ScaleMode::Col, ScaleMode::Row], cfg.fit)
    };

    let mut candidates = Vec::with_capacity(modes.len());
    for &mode in modes {
        let init = round_through_half(&init_scale_f32(&delta, mode))?;
        let fit = fit_layer_vector(&cache, &base_w, &mask, mode, &init, &fit_cfg)?;
        student.install(id, LayerPatch::new(mask.clone(), mode, fit.values.clone())?)?;
        let loss = end_loss(student.model(), val_logits)?;
        candidates.push(CandidateResult {
            mode,
            values: fit.values,
            train_curve: fit.train_curve,
            train_mse: fit.train_mse,
            val_mse: fit.val_mse,
            end_loss: loss,
        });
    }

    let chosen = if cfg.scalar_baseline {
        ScaleMode::Scalar
    } else {
        let score = |m: ScaleMode| {
            let c = candidates.iter().find(|c| c.mode == m).expect("both axes fitted");
            match cfg.select_by {
                SelectBy::End => c.end_loss,
                SelectBy::Layer => c.val_mse,
            }
        };
        if score(ScaleMode::Row) <= score(ScaleMode::Col) {
            ScaleMode::Row
        } else {
            ScaleMode::Col
        }
    };
    let winner = candidates
        .iter()
        .find(|c| c.mode == chosen)
        .expect("chosen candidate exists");
    student.install(id, LayerPatch::new(mask, chosen, winner.values.clone())?)?;
    Ok(LayerFitResult {
        layer: layer.to_string(),
        chosen,
        candidates,
    })
}
