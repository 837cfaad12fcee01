//! Sign masks packed at one bit per entry, per-axis FP16 scale vectors, and
//! the broadcast patch `Ŵ = v ⊙ B + W_b`.
//!
//! Bit layout: each output row occupies `ceil(d_in / 8)` bytes; bit `k` of
//! byte `m` holds column `8m + k` (LSB first). A set bit is `+1`, a clear bit
//! `−1`, and `sign(0) = +1`. Padding bits past `d_in` are always zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::half::{half_to_f32_vec, to_half_vec};
use crate::tensor::{reduce_lanes, Half, Matrix};

/// Which dimension a scale vector indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// One scale per output unit (length `d_out`).
    Row,
    /// One scale per input unit (length `d_in`).
    Col,
}

impl Axis {
    pub fn to_byte(self) -> u8 {
        match self {
            Axis::Row => 0,
            Axis::Col => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Axis::Row),
            1 => Ok(Axis::Col),
            other => Err(Error::Malformed {
                what: "axis tag",
                detail: format!("expected 0 or 1, found {other}"),
            }),
        }
    }

    /// Vector length this axis needs for a `d_out × d_in` matrix.
    pub fn len_for(self, d_out: usize, d_in: usize) -> usize {
        match self {
            Axis::Row => d_out,
            Axis::Col => d_in,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Row => "row",
            Axis::Col => "col",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(Axis::Row),
            "col" => Ok(Axis::Col),
            other => Err(Error::Config(format!("unknown axis {other:?}"))),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PackedSignMask {
    d_out: usize,
    d_in: usize,
    bits: Vec<u8>,
}

impl fmt::Debug for PackedSignMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PackedSignMask({}x{})", self.d_out, self.d_in)
    }
}

#[inline]
pub fn packed_row_bytes(d_in: usize) -> usize {
    d_in.div_ceil(8)
}

impl PackedSignMask {
    /// Wraps raw packed bytes, checking length and zero padding.
    pub fn from_bytes(d_out: usize, d_in: usize, bits: Vec<u8>) -> Result<Self> {
        let stride = packed_row_bytes(d_in);
        if bits.len() != d_out * stride {
            return Err(Error::Malformed {
                what: "sign mask",
                detail: format!(
                    "{}x{} needs {} bytes, got {}",
                    d_out,
                    d_in,
                    d_out * stride,
                    bits.len()
                ),
            });
        }
        let tail = d_in % 8;
        if tail != 0 {
            let pad_mask = !((1u8 << tail) - 1);
            for r in 0..d_out {
                if bits[r * stride + stride - 1] & pad_mask != 0 {
                    return Err(Error::Malformed {
                        what: "sign mask",
                        detail: format!("non-zero padding bits in row {r}"),
                    });
                }
            }
        }
        Ok(Self { d_out, d_in, bits })
    }

    /// Packs an arbitrary ±1 (or any-signed) matrix: entries `>= 0` map to 1.
    pub fn from_signs(m: &Matrix) -> Self {
        let (d_out, d_in) = m.shape();
        let stride = packed_row_bytes(d_in);
        let mut bits = vec![0u8; d_out * stride];
        for i in 0..d_out {
            let dst = &mut bits[i * stride..(i + 1) * stride];
            for (j, &v) in m.row(i).iter().enumerate() {
                if v >= 0.0 {
                    dst[j >> 3] |= 1 << (j & 7);
                }
            }
        }
        Self { d_out, d_in, bits }
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out, self.d_in)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn row_bytes(&self, i: usize) -> &[u8] {
        let stride = packed_row_bytes(self.d_in);
        &self.bits[i * stride..(i + 1) * stride]
    }

    #[inline]
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        let stride = packed_row_bytes(self.d_in);
        self.bits[i * stride + (j >> 3)] >> (j & 7) & 1 == 1
    }

    /// Dense ±1 matrix.
    pub fn unpack(&self) -> Matrix {
        let mut out = Matrix::zeros(self.d_out, self.d_in);
        for i in 0..self.d_out {
            let src = self.row_bytes(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = if src[j >> 3] >> (j & 7) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                };
            }
        }
        out
    }

    fn check_base(&self, base: &Matrix, op: &'static str) -> Result<()> {
        if base.shape() != self.shape() {
            return Err(Error::Dimension {
                op,
                lhs: base.shape(),
                rhs: self.shape(),
            });
        }
        Ok(())
    }
}

/// `B = sign(ΔW)` packed along the input axis.
pub fn sign_mask(delta: &Matrix) -> PackedSignMask {
    PackedSignMask::from_signs(delta)
}

/// A scale vector stored in binary16, tagged with the axis it runs along.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisScaleVector {
    pub axis: Axis,
    pub values: Vec<Half>,
}

impl AxisScaleVector {
    pub fn new(axis: Axis, values: Vec<Half>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|h| !h.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite scale {bad:?}")));
        }
        Ok(Self { axis, values })
    }

    /// Rounds FP32 scales to binary16.
    pub fn from_f32(axis: Axis, values: &[f32]) -> Result<Self> {
        Self::new(axis, to_half_vec(values)?)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        half_to_f32_vec(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_len(&self, d_out: usize, d_in: usize) -> Result<()> {
        check_scale_len(self.axis, self.values.len(), d_out, d_in)
    }
}

fn check_scale_len(axis: Axis, len: usize, d_out: usize, d_in: usize) -> Result<()> {
    let want = axis.len_for(d_out, d_in);
    if len != want {
        return Err(Error::Dimension {
            op: "scale vector",
            lhs: (d_out, d_in),
            rhs: (len, 1),
        });
    }
    Ok(())
}

/// `±1.0` patterns for every byte value, LSB first.
static SIGN_LUT: [[f32; 8]; 256] = {
    let mut lut = [[0.0f32; 8]; 256];
    let mut b = 0;
    while b < 256 {
        let mut k = 0;
        while k < 8 {
            lut[b][k] = if (b >> k) & 1 == 1 { 1.0 } else { -1.0 };
            k += 1;
        }
        b += 1;
    }
    lut
};

/// The eight `±1.0` signs packed in `byte`.
#[inline]
pub(crate) fn sign_lut(byte: u8) -> &'static [f32; 8] {
    &SIGN_LUT[byte as usize]
}

/// Adds `v ⊙ B` to `weight` in place.
pub fn apply_patch_in_place(
    weight: &mut Matrix,
    mask: &PackedSignMask,
    axis: Axis,
    scale: &[f32],
) -> Result<()> {
    mask.check_base(weight, "reconstruct")?;
    check_scale_len(axis, scale.len(), mask.d_out, mask.d_in)?;
    let d_in = mask.d_in;
    let full = d_in / 8;
    for i in 0..mask.d_out {
        let bits = mask.row_bytes(i);
        let row = weight.row_mut(i);
        let (head, tail) = row.split_at_mut(full * 8);
        match axis {
            Axis::Row => {
                let v = scale[i];
                for (chunk, &byte) in head.chunks_exact_mut(8).zip(bits) {
                    let signs = &SIGN_LUT[byte as usize];
                    for k in 0..8 {
                        chunk[k] += signs[k] * v;
                    }
                }
                for (k, w) in tail.iter_mut().enumerate() {
                    *w += SIGN_LUT[bits[full] as usize][k] * v;
                }
            }
            Axis::Col => {
                for ((chunk, &byte), vs) in head.chunks_exact_mut(8).zip(bits).zip(scale.chunks_exact(8)) {
                    let signs = &SIGN_LUT[byte as usize];
                    for k in 0..8 {
                        chunk[k] += signs[k] * vs[k];
                    }
                }
                for (k, w) in tail.iter_mut().enumerate() {
                    *w += SIGN_LUT[bits[full] as usize][k] * scale[full * 8 + k];
                }
            }
        }
    }
    Ok(())
}

/// `Ŵ = W_b + v ⊙ B`, with `v` broadcast along `axis`. Scales are FP32 here;
/// [`reconstruct`] converts stored halves once and delegates.
pub fn reconstruct_f32(base: &Matrix, mask: &PackedSignMask, axis: Axis, scale: &[f32]) -> Result<Matrix> {
    let mut out = base.clone();
    apply_patch_in_place(&mut out, mask, axis, scale)?;
    Ok(out)
}

pub fn reconstruct(base: &Matrix, mask: &PackedSignMask, scale: &AxisScaleVector) -> Result<Matrix> {
    reconstruct_f32(base, mask, scale.axis, &scale.to_f32())
}

/// One scale for the whole matrix.
pub fn scalar_reconstruct(base: &Matrix, mask: &PackedSignMask, alpha: f32) -> Result<Matrix> {
    reconstruct_f32(base, mask, Axis::Row, &vec![alpha; mask.d_out])
}

/// `x · Ŵᵀ` computed as `x · W_bᵀ` plus a sign-weighted correction read
/// straight from the packed bits, without materializing `Ŵ`.
pub fn patched_forward_f32(
    x: &Matrix,
    base: &Matrix,
    mask: &PackedSignMask,
    axis: Axis,
    scale: &[f32],
) -> Result<Matrix> {
    mask.check_base(base, "patched_forward")?;
    check_scale_len(axis, scale.len(), mask.d_out, mask.d_in)?;
    let mut out = x.matmul_t(base)?;
    let d_in = mask.d_in;
    let mut scaled = vec![0.0f32; d_in];
    for n in 0..x.rows() {
        let xr = x.row(n);
        let src: &[f32] = match axis {
            Axis::Row => xr,
            Axis::Col => {
                for ((s, &xv), &v) in scaled.iter_mut().zip(xr).zip(scale) {
                    *s = xv * v;
                }
                &scaled
            }
        };
        let orow = out.row_mut(n);
        for (i, o) in orow.iter_mut().enumerate() {
            let acc = signed_dot(mask.row_bytes(i), src);
            *o += match axis {
                Axis::Row => scale[i] * acc,
                Axis::Col => acc,
            };
        }
    }
    Ok(out)
}

/// `Σ_j ±src[j]` with signs from one packed row. Uses the same lane layout
/// as [`crate::tensor::dot`].
#[inline]
pub(crate) fn signed_dot(bits: &[u8], src: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let full = src.len() / 8;
    for (chunk, &byte) in src[..full * 8].chunks_exact(8).zip(bits) {
        let signs = &SIGN_LUT[byte as usize];
        for l in 0..8 {
            acc[l] += signs[l] * chunk[l];
        }
    }
    if full * 8 < src.len() {
        let signs = &SIGN_LUT[bits[full] as usize];
        for (l, &x) in src[full * 8..].iter().enumerate() {
            acc[l] += signs[l] * x;
        }
    }
    reduce_lanes(acc)
}

pub fn patched_forward(
    x: &Matrix,
    base: &Matrix,
    mask: &PackedSignMask,
    scale: &AxisScaleVector,
) -> Result<Matrix> {
    patched_forward_f32(x, base, mask, scale.axis, &scale.to_f32())
}
