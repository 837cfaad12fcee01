use std::collections::BTreeMap;

use crate::codec::{reconstruct_f32, AxisScaleVector, PackedSignMask};
use crate::error::{Error, Result};
use crate::model::{LayerId, ToyModel};
use crate::tensor::half::round_through_half;
use crate::tensor::Matrix;

use super::ScaleMode;

/// Frozen sign mask plus trainable FP32 scales for one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPatch {
    pub mask: PackedSignMask,
    pub mode: ScaleMode,
    pub values: Vec<f32>,
}

impl LayerPatch {
    pub fn new(mask: PackedSignMask, mode: ScaleMode, values: Vec<f32>) -> Result<Self> {
        let want = mode.len_for(mask.d_out(), mask.d_in());
        if values.len() != want {
            return Err(Error::Dimension {
                op: "layer patch",
                lhs: mask.shape(),
                rhs: (values.len(), 1),
            });
        }
        Ok(Self { mask, mode, values })
    }

    /// Scales expanded to the stored axis (a scalar becomes a constant row).
    pub fn storage_values(&self) -> Vec<f32> {
        match self.mode {
            ScaleMode::Scalar => vec![self.values[0]; self.mask.d_out()],
            _ => self.values.clone(),
        }
    }

    pub fn weight(&self, base: &Matrix) -> Result<Matrix> {
        reconstruct_f32(base, &self.mask, self.mode.storage_axis(), &self.storage_values())
    }

    pub fn to_scale_vector(&self) -> Result<AxisScaleVector> {
        AxisScaleVector::from_f32(self.mode.storage_axis(), &self.storage_values())
    }
}

/// The base model with a growing set of compressed projections installed.
/// Unpatched projections keep their base weights.
#[derive(Clone, Debug)]
pub struct CompressedStudent {
    base: ToyModel,
    model: ToyModel,
    patches: BTreeMap<LayerId, LayerPatch>,
}

impl CompressedStudent {
    pub fn new(base: ToyModel) -> Self {
        Self {
            model: base.clone(),
            base,
            patches: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> &ToyModel {
        &self.base
    }

    /// The dense model with every installed patch applied.
    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn patches(&self) -> &BTreeMap<LayerId, LayerPatch> {
        &self.patches
    }

    pub fn patch(&self, id: LayerId) -> Option<&LayerPatch> {
        self.patches.get(&id)
    }

    /// Writes `W_b + v ⊙ B` into the student and remembers the patch.
    pub fn install(&mut self, id: LayerId, patch: LayerPatch) -> Result<()> {
        let w = patch.weight(self.base.proj(id)?)?;
        self.model.set_proj(id, w)?;
        self.patches.insert(id, patch);
        Ok(())
    }

    /// Restores the base weight of `id`.
    pub fn remove(&mut self, id: LayerId) -> Result<Option<LayerPatch>> {
        let w = self.base.proj(id)?.clone();
        self.model.set_proj(id, w)?;
        Ok(self.patches.remove(&id))
    }

    /// Overwrites the scales of an installed patch and refreshes its weight.
    pub fn set_values(&mut self, id: LayerId, values: &[f32]) -> Result<()> {
        let patch = self
            .patches
            .get_mut(&id)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))?;
        if patch.values.len() != values.len() {
            return Err(Error::Dimension {
                op: "set_values",
                lhs: (patch.values.len(), 1),
                rhs: (values.len(), 1),
            });
        }
        patch.values.copy_from_slice(values);
        let w = patch.weight(self.base.proj(id)?)?;
        self.model.set_proj(id, w)
    }

    /// Rounds every scale through binary16 and reinstalls, so the student
    /// matches what a saved artifact reproduces.
    pub fn round_to_half(&mut self) -> Result<()> {
        let ids: Vec<LayerId> = self.patches.keys().copied().collect();
        for id in ids {
            let rounded = round_through_half(&self.patches[&id].values)?;
            self.set_values(id, &rounded)?;
        }
        Ok(())
    }
}
