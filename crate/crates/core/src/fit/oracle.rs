//! Closed-form least-squares scales. The layer loss is quadratic in `v`, so
//! the normal equations give its global minimum. Everything here runs in f64
//! from dense ±1 signs and shares no arithmetic with the iterative trainer.

use nalgebra::{DMatrix, DVector};

use crate::codec::PackedSignMask;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::ScaleMode;

const RIDGE: f64 = 1e-8;

struct Dense {
    n: usize,
    d_out: usize,
    d_in: usize,
    x: Vec<f64>,
    signs: Vec<f64>,
    /// `Y − X·W_bᵀ`
    residual: Vec<f64>,
}

impl Dense {
    fn new(x: &Matrix, y: &Matrix, base: &Matrix, mask: &PackedSignMask) -> Result<Self> {
        let (d_out, d_in) = mask.shape();
        if base.shape() != (d_out, d_in) || x.cols() != d_in || y.cols() != d_out || x.rows() != y.rows() {
            return Err(Error::Dimension {
                op: "closed-form oracle",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let n = x.rows();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let signs: Vec<f64> = mask.unpack().data().iter().map(|&v| v as f64).collect();
        let bs: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
        let mut residual = vec![0.0; n * d_out];
        for r in 0..n {
            for i in 0..d_out {
                let mut acc = 0.0;
                for j in 0..d_in {
                    acc += xs[r * d_in + j] * bs[i * d_in + j];
                }
                residual[r * d_out + i] = y.get(r, i) as f64 - acc;
            }
        }
        Ok(Self {
            n,
            d_out,
            d_in,
            x: xs,
            signs,
            residual,
        })
    }

    /// `s[r, i] = Σ_j X[r, j] · B[i, j]`
    fn signed(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n * self.d_out];
        for r in 0..self.n {
            for i in 0..self.d_out {
                let mut acc = 0.0;
                for j in 0..self.d_in {
                    acc += self.x[r * self.d_in + j] * self.signs[i * self.d_in + j];
                }
                s[r * self.d_out + i] = acc;
            }
        }
        s
    }
}

/// Least-squares optimum of the layer loss on `(x, y)` for `mode`.
pub fn closed_form_oracle(
    x: &Matrix,
    y: &Matrix,
    base: &Matrix,
    mask: &PackedSignMask,
    mode: ScaleMode,
) -> Result<Vec<f64>> {
    let d = Dense::new(x, y, base, mask)?;
    match mode {
        ScaleMode::Row => {
            let s = d.signed();
            Ok((0..d.d_out)
                .map(|i| {
                    let (mut num, mut den) = (0.0, 0.0);
                    for r in 0..d.n {
                        let k = r * d.d_out + i;
                        num += d.residual[k] * s[k];
                        den += s[k] * s[k];
                    }
                    if den > 0.0 {
                        num / den
                    } else {
                        num / (den + RIDGE)
                    }
                })
                .collect())
        }
        ScaleMode::Scalar => {
            let s = d.signed();
            let num: f64 = d.residual.iter().zip(&s).map(|(r, s)| r * s).sum();
            let den: f64 = s.iter().map(|s| s * s).sum();
            Ok(vec![if den > 0.0 { num / den } else { num / (den + RIDGE) }])
        }
        ScaleMode::Col => solve_col(&d),
    }
}

/// Normal equations `G v = b` with `G = (XᵀX) ⊙ (BᵀB)` and
/// `b_j = Σ_r X[r, j] · (R·B)[r, j]`.
fn solve_col(d: &Dense) -> Result<Vec<f64>> {
    let (n, d_out, d_in) = (d.n, d.d_out, d.d_in);
    let xm = DMatrix::from_row_slice(n, d_in, &d.x);
    let bm = DMatrix::from_row_slice(d_out, d_in, &d.signs);
    let rm = DMatrix::from_row_slice(n, d_out, &d.residual);
    let gram = (xm.transpose() * &xm).component_mul(&(bm.transpose() * &bm));
    let rb = &rm * &bm;
    let rhs = DVector::from_iterator(d_in, (0..d_in).map(|j| xm.column(j).dot(&rb.column(j))));
    if let Some(ch) = gram.clone().cholesky() {
        return Ok(ch.solve(&rhs).iter().copied().collect());
    }
    let scale = (gram.trace() / d_in as f64).max(1.0);
    let ridged = gram + DMatrix::identity(d_in, d_in) * (RIDGE * scale);
    ridged
        .cholesky()
        .map(|ch| ch.solve(&rhs).iter().copied().collect())
        .ok_or_else(|| Error::Numeric("column normal equations are singular even with ridge".into()))
}

/// Mean squared layer error of `v`, evaluated densely in f64.
pub fn oracle_mse(
    x: &Matrix,
    y: &Matrix,
    base: &Matrix,
    mask: &PackedSignMask,
    mode: ScaleMode,
    v: &[f64],
) -> Result<f64> {
    let d = Dense::new(x, y, base, mask)?;
    if v.len() != mode.len_for(d.d_out, d.d_in) {
        return Err(Error::Dimension {
            op: "oracle_mse",
            lhs: (d.d_out, d.d_in),
            rhs: (v.len(), 1),
        });
    }
    let mut sq = 0.0;
    for r in 0..d.n {
        for i in 0..d.d_out {
            let mut corr = 0.0;
            for j in 0..d.d_in {
                let scale = match mode {
                    ScaleMode::Row => v[i],
                    ScaleMode::Col => v[j],
                    ScaleMode::Scalar => v[0],
                };
                corr += d.x[r * d.d_in + j] * scale * d.signs[i * d.d_in + j];
            }
            let e = d.residual[r * d.d_out + i] - corr;
            sq += e * e;
        }
    }
    Ok(sq / (d.n * d.d_out) as f64)
}
