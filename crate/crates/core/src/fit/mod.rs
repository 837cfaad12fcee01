//! Fitting scale vectors: per-layer activation matching, axis selection by
//! end-to-end loss, joint refinement of all vectors, and the full
//! compression pipeline.

mod adam;
mod compress;
mod e2e;
mod end_loss;
mod layer;
mod objective;
mod oracle;
mod pipeline;
mod student;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::Axis;
use crate::error::{Error, Result};

pub use adam::{cosine_lr, AdamConfig, AdamW};
pub use compress::{compress_layer, CandidateResult, CompressConfig, LayerFitResult, SelectBy};
pub use e2e::{e2e_refine, scale_gradients, E2EConfig, E2EOutcome};
pub use end_loss::{end_loss, TeacherLogits};
pub use layer::{fit_layer_vector, FitConfig, FitOutcome, MINIBATCH_ROWS};
pub use objective::{init_scale_f32, LayerObjective};
pub use oracle::{closed_form_oracle, oracle_mse};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
pub use student::{CompressedStudent, LayerPatch};

/// How a layer's residual magnitude is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Row,
    Col,
    /// One value for the whole matrix (the scalar 1-bit baseline).
    Scalar,
}

impl ScaleMode {
    pub fn len_for(self, d_out: usize, d_in: usize) -> usize {
        match self {
            ScaleMode::Row => d_out,
            ScaleMode::Col => d_in,
            ScaleMode::Scalar => 1,
        }
    }

    /// Axis used when the scales are stored; a scalar is stored as a
    /// constant row vector.
    pub fn storage_axis(self) -> Axis {
        match self {
            ScaleMode::Row | ScaleMode::Scalar => Axis::Row,
            ScaleMode::Col => Axis::Col,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::Row => "row",
            ScaleMode::Col => "col",
            ScaleMode::Scalar => "scalar",
        }
    }
}

impl From<Axis> for ScaleMode {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Row => ScaleMode::Row,
            Axis::Col => ScaleMode::Col,
        }
    }
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(ScaleMode::Row),
            "col" => Ok(ScaleMode::Col),
            "scalar" => Ok(ScaleMode::Scalar),
            other => Err(Error::Config(format!("unknown scale mode {other:?}"))),
        }
    }
}

/// Mean-|ΔW| initialization rounded to binary16.
pub fn init_scale(delta: &crate::tensor::Matrix, axis: Axis) -> Result<crate::codec::AxisScaleVector> {
    crate::codec::AxisScaleVector::from_f32(axis, &init_scale_f32(delta, axis.into()))
}
