//! The per-layer activation-matching loss
//! `L(v) = (1/n) ‖Y − (X·W_bᵀ + correction(v))‖²`, with `n` the number of
//! output entries, and its analytic gradient.

use std::ops::Range;

use crate::codec::{sign_lut, signed_dot, PackedSignMask};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::ScaleMode;

/// Precomputed pieces of one layer's loss on one shard.
///
/// Predictions use the same arithmetic as
/// [`patched_forward_f32`](crate::codec::patched_forward_f32), so data
/// generated by that function has exactly zero residual.
pub struct LayerObjective<'a> {
    x: &'a Matrix,
    y: &'a Matrix,
    mask: &'a PackedSignMask,
    mode: ScaleMode,
    base_out: Matrix,
    /// `X · Bᵀ`, needed by row and scalar modes.
    signed: Option<Matrix>,
}

impl<'a> LayerObjective<'a> {
    pub fn new(
        x: &'a Matrix,
        y: &'a Matrix,
        base: &Matrix,
        mask: &'a PackedSignMask,
        mode: ScaleMode,
    ) -> Result<Self> {
        if base.shape() != mask.shape() {
            return Err(Error::Dimension {
                op: "layer objective",
                lhs: base.shape(),
                rhs: mask.shape(),
            });
        }
        if x.cols() != mask.d_in() || y.cols() != mask.d_out() || x.rows() != y.rows() {
            return Err(Error::Dimension {
                op: "layer objective",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let base_out = x.matmul_t(base)?;
        let signed = match mode {
            ScaleMode::Col => None,
            ScaleMode::Row | ScaleMode::Scalar => Some(signed_sums(x, mask)),
        };
        Ok(Self {
            x,
            y,
            mask,
            mode,
            base_out,
            signed,
        })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    pub fn param_len(&self) -> usize {
        self.mode.len_for(self.mask.d_out(), self.mask.d_in())
    }

    fn check_params(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.param_len() {
            return Err(Error::Dimension {
                op: "scale parameters",
                lhs: self.mask.shape(),
                rhs: (v.len(), 1),
            });
        }
        Ok(())
    }

    fn predict_row(&self, n: usize, v: &[f32], scaled: &mut [f32], out: &mut [f32]) {
        out.copy_from_slice(self.base_out.row(n));
        match self.mode {
            ScaleMode::Row | ScaleMode::Scalar => {
                let s = self.signed.as_ref().expect("signed sums").row(n);
                for (i, o) in out.iter_mut().enumerate() {
                    let vi = if self.mode == ScaleMode::Row { v[i] } else { v[0] };
                    *o += vi * s[i];
                }
            }
            ScaleMode::Col => {
                for ((s, &xv), &vj) in scaled.iter_mut().zip(self.x.row(n)).zip(v) {
                    *s = xv * vj;
                }
                for (i, o) in out.iter_mut().enumerate() {
                    *o += signed_dot(self.mask.row_bytes(i), scaled);
                }
            }
        }
    }

    pub fn predict(&self, v: &[f32]) -> Result<Matrix> {
        self.check_params(v)?;
        let (d_out, d_in) = self.mask.shape();
        let mut out = Matrix::zeros(self.rows(), d_out);
        let mut scaled = vec![0.0f32; d_in];
        for n in 0..self.rows() {
            self.predict_row(n, v, &mut scaled, out.row_mut(n));
        }
        Ok(out)
    }

    /// Mean squared error over every entry of the shard.
    pub fn loss(&self, v: &[f32]) -> Result<f64> {
        Ok(self.loss_grad(v, 0..self.rows(), false)?.0)
    }

    /// Loss and gradient over the rows in `rows`.
    pub fn loss_and_grad(&self, v: &[f32], rows: Range<usize>) -> Result<(f64, Vec<f64>)> {
        self.loss_grad(v, rows, true)
    }

    fn loss_grad(&self, v: &[f32], rows: Range<usize>, want_grad: bool) -> Result<(f64, Vec<f64>)> {
        self.check_params(v)?;
        let (d_out, d_in) = self.mask.shape();
        let n_rows = rows.len();
        if n_rows == 0 {
            return Err(Error::Input("empty minibatch".into()));
        }
        let mut grad = vec![0.0f64; if want_grad { v.len() } else { 0 }];
        let mut scaled = vec![0.0f32; d_in];
        let mut pred = vec![0.0f32; d_out];
        let mut back = vec![0.0f32; d_in];
        let mut sq = 0.0f64;
        for n in rows {
            self.predict_row(n, v, &mut scaled, &mut pred);
            let target = self.y.row(n);
            for (p, &t) in pred.iter().zip(target) {
                let e = (*p - t) as f64;
                sq += e * e;
            }
            if !want_grad {
                continue;
            }
            match self.mode {
                ScaleMode::Row | ScaleMode::Scalar => {
                    let s = self.signed.as_ref().expect("signed sums").row(n);
                    for i in 0..d_out {
                        let g = (pred[i] - target[i]) as f64 * s[i] as f64;
                        if self.mode == ScaleMode::Row {
                            grad[i] += g;
                        } else {
                            grad[0] += g;
                        }
                    }
                }
                ScaleMode::Col => {
                    // (E · B)[n, j] then weight by X[n, j].
                    back.iter_mut().for_each(|b| *b = 0.0);
                    for i in 0..d_out {
                        let e = pred[i] - target[i];
                        let bits = self.mask.row_bytes(i);
                        for (chunk, &byte) in back.chunks_mut(8).zip(bits) {
                            let signs = sign_lut(byte);
                            for (b, &sg) in chunk.iter_mut().zip(signs) {
                                *b += sg * e;
                            }
                        }
                    }
                    for ((g, &b), &xv) in grad.iter_mut().zip(&back).zip(self.x.row(n)) {
                        *g += (b * xv) as f64;
                    }
                }
            }
        }
        let count = (n_rows * d_out) as f64;
        grad.iter_mut().for_each(|g| *g *= 2.0 / count);
        Ok((sq / count, grad))
    }
}

/// `X · Bᵀ` read from packed bits.
pub(crate) fn signed_sums(x: &Matrix, mask: &PackedSignMask) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), mask.d_out());
    for n in 0..x.rows() {
        let xr = x.row(n);
        for (i, o) in out.row_mut(n).iter_mut().enumerate() {
            *o = signed_dot(mask.row_bytes(i), xr);
        }
    }
    out
}

/// Mean-|ΔW| initialization: per row, per column, or over the whole matrix.
pub fn init_scale_f32(delta: &Matrix, mode: ScaleMode) -> Vec<f32> {
    let (rows, cols) = delta.shape();
    match mode {
        ScaleMode::Row => (0..rows)
            .map(|i| mean_abs(delta.row(i).iter().copied()))
            .collect(),
        ScaleMode::Col => (0..cols)
            .map(|j| mean_abs((0..rows).map(|i| delta.get(i, j))))
            .collect(),
        ScaleMode::Scalar => vec![mean_abs(delta.data().iter().copied())],
    }
}

fn mean_abs(it: impl ExactSizeIterator<Item = f32>) -> f32 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    (it.map(|v| v.abs() as f64).sum::<f64>() / n as f64) as f32
}
