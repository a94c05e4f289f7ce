//! Scalar abstraction: all numerical routines are generic over `f32`/`f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used by the numerical core.
///
/// The default throughout the toolkit is `f64` (see the type aliases at the
/// crate root); `f32` is supported for memory-constrained experiments but the
/// documented tolerances assume `f64`.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Short type name recorded in persisted files ("f32" or "f64").
    const NAME: &'static str;
    /// Size of one scalar in the little-endian binary encoding.
    const BYTE_WIDTH: usize;

    /// Exact little-endian encoding (round-trips bit-for-bit).
    fn write_le(self, out: &mut Vec<u8>);
    /// Inverse of [`Scalar::write_le`]; `bytes.len()` must equal `BYTE_WIDTH`.
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy cast from `f64`, used for constants and tolerances.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bit_exact() {
        let values = [0.0_f64, -0.0, 1.5, f64::MIN_POSITIVE, 1.0e300, -3.25e-17];
        for v in values {
            let mut buf = Vec::new();
            v.write_le(&mut buf);
            let back = f64::read_le(&buf);
            assert_eq!(v.to_bits(), back.to_bits());
        }
    }

    #[test]
    fn f32_width_and_name() {
        assert_eq!(<f32 as Scalar>::BYTE_WIDTH, 4);
        assert_eq!(<f32 as Scalar>::NAME, "f32");
        let mut buf = Vec::new();
        2.5_f32.write_le(&mut buf);
        assert_eq!(buf.len(), 4);
        assert_eq!(f32::read_le(&buf), 2.5);
    }
}
