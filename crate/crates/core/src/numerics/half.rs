//! IEEE 754 binary16 storage type with bit-level conversions.
//!
//! Narrowing rounds to nearest, ties to even. Widening is exact.

use std::fmt;

/// A binary16 value stored as its raw bit pattern
/// (1 sign bit, 5 exponent bits with bias 15, 10 mantissa bits).
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Half(pub u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const ONE: Half = Half(0x3C00);
    pub const MAX: Half = Half(0x7BFF);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    pub const NAN: Half = Half(0x7E00);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn from_f32(x: f32) -> Self {
        b32_to_b16(x)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        b16_to_b32(self)
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7C00 == 0x7C00 && self.0 & 0x03FF != 0
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<Half> for f32 {
    fn from(h: Half) -> f32 {
        h.to_f32()
    }
}

/// Narrows a binary32 value to binary16 with round-to-nearest-even.
/// Values beyond the largest finite half (65504) round to signed infinity;
/// NaN maps to a quiet NaN carrying the top payload bits.
pub fn b32_to_b16(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return Half(sign | 0x7C00);
        }
        return Half(sign | 0x7E00 | (man >> 13) as u16);
    }

    let half_exp = exp - 127 + 15;
    if half_exp >= 0x1F {
        return Half(sign | 0x7C00);
    }

    if half_exp <= 0 {
        // Result is subnormal or zero.
        if half_exp < -10 {
            return Half(sign);
        }
        let man = man | 0x0080_0000;
        let shift = (14 - half_exp) as u32;
        let mut half_man = man >> shift;
        let round_bit = 1u32 << (shift - 1);
        // Round up when the round bit is set and either a sticky bit or the
        // result's lsb is set.
        if man & round_bit != 0 && man & (3 * round_bit - 1) != 0 {
            half_man += 1;
        }
        return Half(sign | half_man as u16);
    }

    let half = sign | ((half_exp as u16) << 10) | (man >> 13) as u16;
    let round_bit = 0x0000_1000u32;
    if man & round_bit != 0 && man & (3 * round_bit - 1) != 0 {
        // A mantissa carry propagates into the exponent, which also takes
        // 0x7BFF up to infinity.
        Half(half + 1)
    } else {
        Half(half)
    }
}

/// Widens binary16 to binary32. Every half value is exactly representable.
pub fn b16_to_b32(h: Half) -> f32 {
    let h = h.0 as u32;
    let sign = (h & 0x8000) << 16;
    let exp = (h >> 10) & 0x1F;
    let man = h & 0x03FF;

    let bits = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // Subnormal: renormalise so the leading one lands on bit 10.
            let shift = man.leading_zeros() - 21;
            let man = (man << shift) & 0x03FF;
            let exp = 127 - 15 + 1 - shift;
            sign | (exp << 23) | (man << 13)
        }
        (0x1F, 0) => sign | 0x7F80_0000,
        (0x1F, _) => sign | 0x7FC0_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}

/// Narrows a slice in place into `dst`.
pub fn narrow_slice(src: &[f32], dst: &mut [Half]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = b32_to_b16(s);
    }
}

/// Widens a slice into `dst`.
pub fn widen_slice(src: &[Half], dst: &mut [f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = b16_to_b32(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        assert_eq!(b32_to_b16(1.0).0, 0x3C00);
        assert_eq!(b32_to_b16(0.1).0, 0x2E66);
        assert_eq!(b16_to_b32(Half(0x2E66)), 0.099_975_586);
        assert_eq!(b32_to_b16(65504.0).0, 0x7BFF);
        assert_eq!(b32_to_b16(65520.0).0, 0x7C00);
        assert_eq!(b32_to_b16(-65520.0).0, 0xFC00);
        assert_eq!(b16_to_b32(Half(0x0001)), 2f32.powi(-24));
        assert_eq!(b16_to_b32(Half(0xFC00)), f32::NEG_INFINITY);
        assert_eq!(b16_to_b32(Half(0x3C00)), 1.0);
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 2^-11 sits halfway between 1.0 and the next half (1 + 2^-10).
        assert_eq!(b32_to_b16(1.0 + 2f32.powi(-11)).0, 0x3C00);
        // 1 + 3*2^-11 is halfway between odd 0x3C01 and even 0x3C02.
        assert_eq!(b32_to_b16(1.0 + 3.0 * 2f32.powi(-11)).0, 0x3C02);
        // Halfway between 0 and the smallest subnormal rounds to zero.
        assert_eq!(b32_to_b16(2f32.powi(-25)).0, 0x0000);
        assert_eq!(b32_to_b16(2f32.powi(-25) * 1.5).0, 0x0001);
        // Just below the 65520 midpoint stays finite.
        assert_eq!(b32_to_b16(65519.0).0, 0x7BFF);
    }

    #[test]
    fn nan_and_signed_zero() {
        assert!(b32_to_b16(f32::NAN).is_nan());
        assert!(b16_to_b32(Half::NAN).is_nan());
        assert_eq!(b32_to_b16(-0.0).0, 0x8000);
        assert_eq!(b16_to_b32(Half(0x8000)).to_bits(), (-0.0f32).to_bits());
    }
}
