use crate::error::{Error, Result};
use crate::model::{TokenBatch, ToyModel};
use crate::tensor::Matrix;

/// Teacher logits computed once per batch and reused for every end-loss
/// evaluation.
#[derive(Clone, Debug)]
pub struct TeacherLogits {
    batches: Vec<TokenBatch>,
    logits: Vec<Matrix>,
}

impl TeacherLogits {
    pub fn compute(teacher: &ToyModel, batches: Vec<TokenBatch>) -> Result<Self> {
        let logits = batches
            .iter()
            .map(|b| teacher.logits(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { batches, logits })
    }

    pub fn from_parts(batches: Vec<TokenBatch>, logits: Vec<Matrix>) -> Result<Self> {
        if batches.len() != logits.len() {
            return Err(Error::Input(format!(
                "{} batches but {} cached logit sets",
                batches.len(),
                logits.len()
            )));
        }
        Ok(Self { batches, logits })
    }

    pub fn batches(&self) -> &[TokenBatch] {
        &self.batches
    }

    pub fn logits(&self) -> &[Matrix] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Mean over batches of `‖ℓ − ℓ*‖²`. Per-batch terms are summed in batch
/// order.
pub fn end_loss(student: &ToyModel, teacher: &TeacherLogits) -> Result<f64> {
    if teacher.is_empty() {
        return Err(Error::Input("no validation batches for end loss".into()));
    }
    let mut total = 0.0;
    for (batch, target) in teacher.batches.iter().zip(&teacher.logits) {
        let logits = student.logits(batch)?;
        if logits.shape() != target.shape() {
            return Err(Error::Input(format!(
                "cached teacher logits {:?} misaligned with student logits {:?}",
                target.shape(),
                logits.shape()
            )));
        }
        total += logits.dist_sq(target)?;
    }
    Ok(total / teacher.len() as f64)
}
