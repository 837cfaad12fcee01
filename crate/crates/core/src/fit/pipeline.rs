use crate::artifact::{DeltaArtifact, DeltaLayerRecord};
use crate::calib::{CalibConfig, CalibSource, TeacherOutputs};
use crate::error::{Error, Result};
use crate::model::ToyModel;

use super::compress::{compress_layer_inner, CompressConfig, LayerFitResult};
use super::e2e::{e2e_refine, E2EConfig, E2EOutcome};
use super::end_loss::{end_loss, TeacherLogits};
use super::student::CompressedStudent;

#[derive(Clone, Debug, Default)]
pub struct PipelineConfig {
    pub calib: CalibConfig,
    pub compress: CompressConfig,
    pub e2e: E2EConfig,
    /// Token batches to calibrate on; synthetic from `calib.seed` if unset.
    pub source: Option<CalibSource>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub artifact: DeltaArtifact,
    pub layers: Vec<LayerFitResult>,
    pub student: CompressedStudent,
    pub e2e: E2EOutcome,
    /// Validation end loss of the uncompressed base.
    pub base_end_loss: f64,
    /// Validation end loss after per-layer fitting, before refinement.
    pub stacked_end_loss: f64,
    /// Validation end loss of the saved (FP16-rounded) student.
    pub final_end_loss: f64,
}

/// Compresses every projection in order, refines all vectors jointly, and
/// rounds them to FP16. The returned student is exactly what applying the
/// returned artifact to `base` produces.
pub fn run_pipeline(base: &ToyModel, finetuned: &ToyModel, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    if !base.same_architecture(finetuned) {
        return Err(Error::Input(
            "base and fine-tuned models have different architectures".into(),
        ));
    }
    cfg.calib.validate()?;
    cfg.compress.fit.validate()?;
    let source = match &cfg.source {
        Some(s) => s.clone(),
        None => cfg.calib.source_for(base.spec().vocab),
    };
    let val = TeacherLogits::compute(finetuned, source.batches(cfg.calib.val_range())?)?;

    let mut student = CompressedStudent::new(base.clone());
    let base_end_loss = end_loss(student.model(), &val)?;
    let names = base.linear_layer_names();
    let teacher_out = TeacherOutputs::capture(finetuned, &names, &cfg.calib, &source)?;
    let mut layers = Vec::new();
    for name in &names {
        layers.push(compress_layer_inner(
            finetuned,
            Some(&teacher_out),
            &mut student,
            name,
            &cfg.compress,
            &cfg.calib,
            &source,
            &val,
        )?);
    }
    let stacked_end_loss = end_loss(student.model(), &val)?;

    // A token file may run out before the end-to-end budget does.
    let mut e2e_count = cfg.e2e.batches;
    if let Some(n) = source.available() {
        e2e_count = e2e_count.min(n.saturating_sub(cfg.calib.val_range().end));
    }
    let e2e_batches = if e2e_count == 0 {
        Vec::new()
    } else {
        source.batches(cfg.calib.e2e_range(e2e_count))?
    };
    let e2e = e2e_refine(&mut student, finetuned, &cfg.e2e, &e2e_batches)?;

    student.round_to_half()?;
    let final_end_loss = end_loss(student.model(), &val)?;

    let mut records = Vec::with_capacity(layers.len());
    for id in base.layer_ids() {
        if let Some(patch) = student.patch(id) {
            records.push(DeltaLayerRecord::new(
                id.to_string(),
                patch.mask.clone(),
                patch.to_scale_vector()?,
            )?);
        }
    }
    let artifact = DeltaArtifact::new(base.fingerprint(), records)?;
    Ok(PipelineOutput {
        artifact,
        layers,
        student,
        e2e,
        base_end_loss,
        stacked_end_loss,
        final_end_loss,
    })
}
