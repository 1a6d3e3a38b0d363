//! Scalar abstraction over the floating-point element type.
//!
//! All model and loss arithmetic is generic over [`Scalar`], implemented for
//! `f32` and `f64`. The `f32` instantiation backs the on-disk snapshot format;
//! the `f64` instantiation is used where tight numerical identities are
//! checked (finite-difference gradient comparisons, distribution sums).

use num_traits::Float;

pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::str::FromStr
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Bytes per value in the little-endian wire encoding.
    const WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Lossy cast from `f64`, panicking only on values unrepresentable in `T`
/// (never the case for finite config values).
pub fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("scalar conversion")
}

pub fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("scalar widening")
}

/// Numerically stable logistic function. May round to 0 or 1 at saturation.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Logistic function clamped to the open unit interval: saturation that would
/// round to exactly 0 or 1 is pulled back to the nearest representable
/// neighbour instead.
pub fn unit_sigmoid<T: Scalar>(x: T) -> T {
    let below_one = T::one() - T::epsilon() / cast(2.0);
    sigmoid(x).max(T::min_positive_value()).min(below_one)
}

/// ln(1 + e^x) without overflow or underflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// -ln sigma(x) = softplus(-x).
pub fn neg_log_sigmoid<T: Scalar>(x: T) -> T {
    softplus(-x)
}
