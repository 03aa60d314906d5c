//! Storage dtypes and bit-exact conversion to and from the f32 working precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Canonical quiet NaN written for any NaN input when encoding to F16.
pub const F16_QUIET_NAN: u16 = 0x7E00;
/// Canonical quiet NaN written for any NaN input when encoding to BF16.
pub const BF16_QUIET_NAN: u16 = 0x7FC0;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 3] = [DType::F32, DType::F16, DType::BF16];

    pub fn element_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(other.to_string()),
        }
    }
}

/// An encoded scalar: a 32-bit pattern for F32, a 16-bit pattern otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Encoded {
    Bits32(u32),
    Bits16(u16),
}

impl Encoded {
    pub fn as_u32(self) -> u32 {
        match self {
            Encoded::Bits32(b) => b,
            Encoded::Bits16(b) => b as u32,
        }
    }
}

/// Encodes `value` into the bit pattern of `target`, rounding to nearest even.
pub fn convert_scalar(value: f32, target: DType) -> Encoded {
    match target {
        DType::F32 => Encoded::Bits32(value.to_bits()),
        DType::F16 => Encoded::Bits16(f32_to_f16_bits(value)),
        DType::BF16 => Encoded::Bits16(f32_to_bf16_bits(value)),
    }
}

/// Decodes a bit pattern of `dtype` to f32. Exact for every F16 and BF16 value.
pub fn decode_scalar(bits: Encoded, dtype: DType) -> f32 {
    match (dtype, bits) {
        (DType::F32, Encoded::Bits32(b)) => f32::from_bits(b),
        (DType::F16, Encoded::Bits16(b)) => f16_bits_to_f32(b),
        (DType::BF16, Encoded::Bits16(b)) => bf16_bits_to_f32(b),
        (DType::F32, Encoded::Bits16(b)) => f32::from_bits(b as u32),
        (_, Encoded::Bits32(b)) => decode_scalar(Encoded::Bits16(b as u16), dtype),
    }
}

/// Shift right by `shift` bits with round-to-nearest, ties-to-even.
#[inline]
fn shift_round_even(value: u32, shift: u32) -> u32 {
    if shift == 0 {
        return value;
    }
    if shift >= 32 {
        return 0;
    }
    let quotient = value >> shift;
    let remainder = value & ((1u32 << shift) - 1);
    let half = 1u32 << (shift - 1);
    if remainder > half || (remainder == half && quotient & 1 == 1) {
        quotient + 1
    } else {
        quotient
    }
}

pub fn f32_to_f16_bits(value: f32) -> u16 {
    let bits = value.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;

    if exp == 0xff {
        return if man != 0 { F16_QUIET_NAN } else { sign | 0x7c00 };
    }
    // f32 subnormals are far below the smallest f16 subnormal.
    if exp == 0 {
        return sign;
    }

    let half_exp = exp - 127 + 15;
    if half_exp >= 0x1f {
        return sign | 0x7c00;
    }
    if half_exp <= 0 {
        if half_exp < -10 {
            return sign;
        }
        // Subnormal result in units of 2^-24.
        let full = man | 0x0080_0000;
        let shift = (14 - half_exp) as u32;
        return sign | shift_round_even(full, shift) as u16;
    }

    let combined = ((half_exp as u32) << 10) | (man >> 13);
    let rem = man & 0x1fff;
    let rounded = if rem > 0x1000 || (rem == 0x1000 && combined & 1 == 1) {
        combined + 1
    } else {
        combined
    };
    // A carry out of the mantissa bumps the exponent, reaching 0x7c00 (inf) at the top.
    sign | rounded as u16
}

pub fn f16_bits_to_f32(bits: u16) -> f32 {
    let sign = ((bits & 0x8000) as u32) << 16;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let man = (bits & 0x03ff) as u32;
    let out = match exp {
        0 if man == 0 => sign,
        0 => {
            // Subnormal: renormalize into an f32 normal.
            let lead = 31 - man.leading_zeros(); // position of highest set bit, 0..=9
            let f32_exp = lead + 127 - 24;
            let frac = (man << (23 - lead)) & 0x007f_ffff;
            sign | (f32_exp << 23) | frac
        }
        0x1f => sign | 0x7f80_0000 | (man << 13),
        _ => sign | ((exp + 112) << 23) | (man << 13),
    };
    f32::from_bits(out)
}

pub fn f32_to_bf16_bits(value: f32) -> u16 {
    let bits = value.to_bits();
    if value.is_nan() {
        return BF16_QUIET_NAN;
    }
    let bias = 0x7fff + ((bits >> 16) & 1);
    (bits.wrapping_add(bias) >> 16) as u16
}

pub fn bf16_bits_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Decodes a little-endian byte slice of `dtype` elements into f32 values.
pub fn decode_slice(bytes: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16_bits_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16_bits_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    }
}

/// Encodes f32 values as little-endian `dtype` bytes (round-to-nearest-even).
pub fn encode_slice(values: &[f32], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.element_size());
    match dtype {
        DType::F32 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_bits().to_le_bytes())),
        DType::F16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&f32_to_f16_bits(*v).to_le_bytes())),
        DType::BF16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&f32_to_bf16_bits(*v).to_le_bytes())),
    }
    out
}

/// Value a f32 takes after a store/load cycle through `dtype`.
pub fn round_trip(value: f32, dtype: DType) -> f32 {
    decode_scalar(convert_scalar(value, dtype), dtype)
}
