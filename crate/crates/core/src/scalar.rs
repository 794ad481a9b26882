use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rustfft::FftNum;
use serde::{Deserialize, Serialize};

/// Storage type tag written into tensor containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element type of every tensor. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float + FftNum + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    fn put_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `DTYPE.size()` little-endian bytes.
    fn take_le(bytes: &[u8]) -> Self;

    /// Next representable value in the direction of `target`.
    fn step_toward(self, target: Self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn step_toward(self, target: Self) -> Self {
        if self == target || self.is_nan() {
            return self;
        }
        if self == 0.0 {
            let tiny = f32::from_bits(1);
            return if target > 0.0 { tiny } else { -tiny };
        }
        let bits = self.to_bits();
        let up = (target > self) == (self > 0.0);
        f32::from_bits(if up { bits + 1 } else { bits - 1 })
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn step_toward(self, target: Self) -> Self {
        if self == target || self.is_nan() {
            return self;
        }
        if self == 0.0 {
            let tiny = f64::from_bits(1);
            return if target > 0.0 { tiny } else { -tiny };
        }
        let bits = self.to_bits();
        let up = (target > self) == (self > 0.0);
        f64::from_bits(if up { bits + 1 } else { bits - 1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_toward_moves_one_ulp() {
        let x = 1.0f32;
        assert_eq!(x.step_toward(2.0), f32::from_bits(x.to_bits() + 1));
        assert_eq!(x.step_toward(0.0), f32::from_bits(x.to_bits() - 1));
        assert_eq!((-1.0f64).step_toward(0.0), -f64::from_bits(1.0f64.to_bits() - 1));
        assert!(0.0f64.step_toward(-1.0) < 0.0);
    }

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.5f32.put_le(&mut buf);
        (-2.25f64).put_le(&mut buf);
        assert_eq!(f32::take_le(&buf[..4]), 1.5);
        assert_eq!(f64::take_le(&buf[4..]), -2.25);
    }
}
