use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, SeededRng};

use super::{snap_to_grid, ToyModel};

/// Which axis the synthetic delta magnitudes vary along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaAxis {
    Row,
    Col,
    Isotropic,
}

impl FromStr for DeltaAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(DeltaAxis::Row),
            "col" => Ok(DeltaAxis::Col),
            "isotropic" | "iso" => Ok(DeltaAxis::Isotropic),
            other => Err(Error::Config(format!("unknown delta axis {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaProfile {
    pub axis: DeltaAxis,
    pub magnitude: f32,
    pub seed: u64,
}

impl Default for DeltaProfile {
    fn default() -> Self {
        Self {
            axis: DeltaAxis::Row,
            magnitude: 0.02,
            seed: 1,
        }
    }
}

/// A synthetic fine-tune and the per-projection scales it was built from.
/// `scales[name]` has length d_out (row), d_in (col) or 1 (isotropic).
#[derive(Clone, Debug)]
pub struct SynthFinetune {
    pub model: ToyModel,
    pub scales: BTreeMap<String, Vec<f32>>,
}

/// Adds `ΔW = s ⊗ sign-pattern` to every projection of `base`.
///
/// Scales are log-uniform in `[0.1·magnitude, magnitude]`, one per row, one
/// per column, or one per matrix; signs are ±1 with equal probability.
/// Scales are snapped to the weight grid so the delta is recovered exactly by
/// `W_f − W_b`. Embeddings, norms and the output head are left untouched.
pub fn synth_finetune(base: &ToyModel, profile: DeltaProfile) -> Result<SynthFinetune> {
    if !(profile.magnitude >= 0.0) || !profile.magnitude.is_finite() {
        return Err(Error::Config(format!(
            "delta magnitude must be a finite non-negative number, got {}",
            profile.magnitude
        )));
    }
    let mut model = base.clone();
    let mut scales = BTreeMap::new();
    for (idx, id) in base.layer_ids().into_iter().enumerate() {
        let mut rng = SeededRng::derived(profile.seed, idx as u64);
        let w = base.proj(id)?;
        let (rows, cols) = w.shape();
        let mut draw = || snap_to_grid(profile.magnitude * 10f32.powf(-(rng.uniform() as f32)));
        let s: Vec<f32> = match profile.axis {
            DeltaAxis::Row => (0..rows).map(|_| draw()).collect(),
            DeltaAxis::Col => (0..cols).map(|_| draw()).collect(),
            DeltaAxis::Isotropic => vec![draw()],
        };
        let delta = Matrix::from_fn(rows, cols, |i, j| {
            let scale = match profile.axis {
                DeltaAxis::Row => s[i],
                DeltaAxis::Col => s[j],
                DeltaAxis::Isotropic => s[0],
            };
            scale * rng.sign()
        });
        model.set_proj(id, w.add(&delta)?)?;
        scales.insert(id.to_string(), s);
    }
    Ok(SynthFinetune { model, scales })
}
