//! IEEE-754 binary16 storage for scale vectors.

use half::f16;

use crate::error::{Error, Result};

/// Raw binary16 payload. Conversions go through [`to_half_round`] so that
/// out-of-range values saturate instead of becoming infinite.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(pub u16);

impl std::fmt::Debug for Half {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const ONE: Half = Half(0x3C00);
    /// Largest finite binary16 value, 65504.
    pub const MAX: Half = Half(0x7BFF);

    #[inline]
    pub fn bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f16::from_bits(self.0).to_f32()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }
}

/// Round-to-nearest-even conversion; magnitudes past the binary16 range
/// saturate to ±65504.
pub fn to_half_round(x: f32) -> Result<Half> {
    if x.is_nan() {
        return Err(Error::InvalidValue("NaN cannot be converted to half".into()));
    }
    let h = f16::from_f32(x);
    if h.is_infinite() {
        let sign = if x.is_sign_negative() { 0x8000 } else { 0 };
        return Ok(Half(sign | Half::MAX.0));
    }
    Ok(Half(h.to_bits()))
}

/// Converts a slice, failing on the first NaN.
pub fn to_half_vec(xs: &[f32]) -> Result<Vec<Half>> {
    xs.iter().map(|&x| to_half_round(x)).collect()
}

pub fn half_to_f32_vec(hs: &[Half]) -> Vec<f32> {
    hs.iter().map(|h| h.to_f32()).collect()
}

/// Rounds each value through binary16 and back.
pub fn round_through_half(xs: &[f32]) -> Result<Vec<f32>> {
    Ok(half_to_f32_vec(&to_half_vec(xs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values() {
        assert_eq!(to_half_round(1.0).unwrap(), Half(0x3C00));
        assert_eq!(to_half_round(0.0).unwrap(), Half(0x0000));
        assert_eq!(to_half_round(-2.0).unwrap(), Half(0xC000));
    }

    #[test]
    fn saturates_instead_of_inf() {
        assert_eq!(to_half_round(1e9).unwrap(), Half::MAX);
        assert_eq!(to_half_round(-1e9).unwrap().to_f32(), -65504.0);
        assert_eq!(to_half_round(f32::INFINITY).unwrap(), Half::MAX);
    }

    #[test]
    fn nan_rejected() {
        assert!(matches!(to_half_round(f32::NAN), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 2^-11 is exactly halfway between 1.0 and 1 + 2^-10.
        let tie = 1.0 + 2f32.powi(-11);
        assert_eq!(to_half_round(tie).unwrap(), Half(0x3C00));
        // 1 + 3·2^-11 sits between 0x3C01 and 0x3C02; even mantissa wins.
        let tie = 1.0 + 3.0 * 2f32.powi(-11);
        assert_eq!(to_half_round(tie).unwrap(), Half(0x3C02));
    }

    #[test]
    fn roundtrip_idempotent() {
        for &x in &[0.1f32, 2.71875, -7.25e-3, 6.0e-6, 1234.5] {
            let once = to_half_round(x).unwrap().to_f32();
            let twice = to_half_round(once).unwrap().to_f32();
            assert_eq!(once.to_bits(), twice.to_bits());
        }
    }
}
