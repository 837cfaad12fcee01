use std::sync::OnceLock;

use axdelta::calib::CalibConfig;
use axdelta::codec::sign_mask;
use axdelta::fit::{
    e2e_refine, run_pipeline, CompressedStudent, E2EConfig, LayerPatch, PipelineConfig, PipelineOutput,
    ScaleMode,
};
use axdelta::model::{synth_finetune, DeltaAxis, DeltaProfile, ModelSpec, TokenBatch, ToyModel};
use axdelta::report::LayerReport;
use axdelta::tensor::SeededRng;

fn base() -> ToyModel {
    ToyModel::init_base(ModelSpec::default()).unwrap()
}

fn finetune(base: &ToyModel, axis: DeltaAxis) -> ToyModel {
    synth_finetune(
        base,
        DeltaProfile {
            axis,
            ..Default::default()
        },
    )
    .unwrap()
    .model
}

fn row_run() -> &'static (ToyModel, ToyModel, PipelineOutput) {
    static RUN: OnceLock<(ToyModel, ToyModel, PipelineOutput)> = OnceLock::new();
    RUN.get_or_init(|| {
        let b = base();
        let f = finetune(&b, DeltaAxis::Row);
        let out = run_pipeline(&b, &f, &PipelineConfig::default()).unwrap();
        (b, f, out)
    })
}

#[test]
fn row_finetune_selects_row_in_every_block() {
    let (b, _, out) = row_run();
    for block in 0..b.spec().n_layers {
        let prefix = format!("blocks.{block}.");
        let rows = out
            .layers
            .iter()
            .filter(|l| l.layer.starts_with(&prefix) && l.chosen == ScaleMode::Row)
            .count();
        assert!(rows >= 6, "block {block}: {rows}/7 row");
    }
}

#[test]
fn pipeline_losses_are_ordered() {
    let (_, _, out) = row_run();
    assert!(out.stacked_end_loss < out.base_end_loss / 100.0);
    assert!(out.e2e.final_loss <= out.e2e.initial_loss);
    assert!(out.final_end_loss < out.base_end_loss / 100.0);
}

#[test]
fn report_lists_every_projection_in_order() {
    let (b, _, out) = row_run();
    let report = LayerReport::from_pipeline(out);
    let names: Vec<String> = report.layers.iter().map(|l| l.layer.clone()).collect();
    assert_eq!(names, b.linear_layer_names());
    let reparsed = LayerReport::parse(&report.to_text()).unwrap();
    assert_eq!(reparsed.to_text(), report.to_text());
    for l in &report.layers {
        for key in ["end_loss_row", "end_loss_col", "val_mse_row", "train_mse_col"] {
            assert!(l.metric(key).is_some(), "{} lacks {key}", l.layer);
        }
    }
}

#[test]
fn masks_in_artifact_are_signs_of_the_delta() {
    let (b, f, out) = row_run();
    for r in &out.artifact.records {
        let id = b.resolve(&r.name).unwrap();
        let d = f.proj(id).unwrap().sub(b.proj(id).unwrap()).unwrap();
        assert_eq!(r.mask, sign_mask(&d), "{}", r.name);
    }
}

#[test]
fn identical_models_give_zero_vectors() {
    let b = base();
    let cfg = PipelineConfig {
        calib: CalibConfig {
            train_batches: 8,
            ..Default::default()
        },
        e2e: E2EConfig {
            batches: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = run_pipeline(&b, &b, &cfg).unwrap();
    assert_eq!(out.final_end_loss, 0.0);
    assert_eq!(out.artifact.records.len(), b.linear_layer_names().len());
    for r in &out.artifact.records {
        assert!(r.scale.to_f32().iter().all(|&v| v == 0.0), "{}", r.name);
    }
}

#[test]
fn isotropic_finetune_axes_score_alike() {
    let b = base();
    let f = finetune(&b, DeltaAxis::Isotropic);
    let cfg = PipelineConfig {
        calib: CalibConfig {
            train_batches: 20,
            ..Default::default()
        },
        e2e: E2EConfig {
            batches: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = run_pipeline(&b, &f, &cfg).unwrap();
    for l in &out.layers {
        let row = l.candidate(ScaleMode::Row).unwrap().end_loss;
        let col = l.candidate(ScaleMode::Col).unwrap().end_loss;
        // Once every layer is patched both losses sit near zero; compare
        // against the base loss there instead.
        let tol = 0.05 * row.max(col) + 1e-8 * out.base_end_loss;
        assert!((row - col).abs() <= tol, "{}: row {row:e} col {col:e}", l.layer);
    }
}

#[test]
fn scalar_baseline_stores_constant_rows() {
    let b = base();
    let f = finetune(&b, DeltaAxis::Row);
    let mut cfg = PipelineConfig {
        calib: CalibConfig {
            train_batches: 8,
            ..Default::default()
        },
        e2e: E2EConfig {
            batches: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.compress.scalar_baseline = true;
    let out = run_pipeline(&b, &f, &cfg).unwrap();
    for r in &out.artifact.records {
        let v = r.scale.to_f32();
        assert_eq!(r.axis(), axdelta::codec::Axis::Row);
        assert!(v.iter().all(|&x| x == v[0]) && v[0] > 0.0, "{}", r.name);
    }
    assert!(out.layers.iter().all(|l| l.chosen == ScaleMode::Scalar));
}

fn one_block() -> (ToyModel, ToyModel) {
    let b = ToyModel::init_base(ModelSpec {
        n_layers: 1,
        ..Default::default()
    })
    .unwrap();
    let f = finetune(&b, DeltaAxis::Col);
    (b, f)
}

/// Student carrying the true scales of `f`, each multiplied by `factor`.
fn perturbed_student(b: &ToyModel, f: &ToyModel, factor: f32) -> CompressedStudent {
    let mut s = CompressedStudent::new(b.clone());
    let truth = synth_finetune(
        b,
        DeltaProfile {
            axis: DeltaAxis::Col,
            ..Default::default()
        },
    )
    .unwrap();
    for id in b.layer_ids() {
        let d = f.proj(id).unwrap().sub(b.proj(id).unwrap()).unwrap();
        let v: Vec<f32> = truth.scales[&id.to_string()].iter().map(|x| x * factor).collect();
        s.install(id, LayerPatch::new(sign_mask(&d), ScaleMode::Col, v).unwrap())
            .unwrap();
    }
    s
}

fn e2e_batches(n: usize) -> Vec<TokenBatch> {
    let mut rng = SeededRng::new(77);
    (0..n).map(|_| TokenBatch::random(&mut rng, 4, 16, 256)).collect()
}

#[test]
fn e2e_with_zero_epochs_changes_nothing() {
    let (b, f) = one_block();
    let mut s = perturbed_student(&b, &f, 1.5);
    let before = s.clone();
    let cfg = E2EConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = e2e_refine(&mut s, &f, &cfg, &e2e_batches(3)).unwrap();
    assert_eq!(out.initial_loss, out.final_loss);
    assert_eq!(s.patches(), before.patches());
}

#[test]
fn e2e_reduces_loss_and_keeps_masks() {
    let (b, f) = one_block();
    let mut s = perturbed_student(&b, &f, 1.5);
    let masks: Vec<_> = s.patches().values().map(|p| p.mask.clone()).collect();
    let out = e2e_refine(
        &mut s,
        &f,
        &E2EConfig {
            batches: 40,
            ..Default::default()
        },
        &e2e_batches(40),
    )
    .unwrap();
    assert!(out.final_loss < out.initial_loss, "{out:?}");
    let after: Vec<_> = s.patches().values().map(|p| p.mask.clone()).collect();
    assert_eq!(masks, after);
}

#[test]
fn true_scales_give_the_teacher_exactly() {
    let (b, f) = one_block();
    let s = perturbed_student(&b, &f, 1.0);
    for id in b.layer_ids() {
        assert_eq!(s.model().proj(id).unwrap(), f.proj(id).unwrap());
    }
}
