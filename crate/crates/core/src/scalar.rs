//! Scalar abstraction: the whole crate is generic over one floating-point
//! trait, instantiated at `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar the numerical code is written against.
///
/// Everything here is satisfied by `f32` and `f64`; the blanket impl below
/// picks both up. `cast` is total for the types we admit, so constants can be
/// written as `f64` literals and converted at use sites.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Convert an `f64` constant into this scalar type.
    fn cast(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to any Scalar")
    }

    /// Widen to `f64` (lossless for f32/f64).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar widens to f64")
    }
}

impl<T> Scalar for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Default
        + Display
        + Debug
        + Send
        + Sync
        + 'static
{
}

/// Numerically stable softplus, `ln(1 + e^x)`, used to keep receptive-field
/// widths positive.
pub fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|}) avoids overflow on both tails.
    x.max(T::zero()) + x.abs().neg().exp().ln_1p()
}

/// Derivative of softplus: the logistic sigmoid.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + x.neg().exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of softplus: the raw value whose softplus is `t` (requires t > 0).
pub fn softplus_inv<T: Scalar>(t: T) -> T {
    // ln(e^t - 1) = t + ln(1 - e^{-t}), stable for large t.
    t + (-((-t).exp())).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            let naive = (1.0 + x.exp()).ln();
            assert!((softplus(x) - naive).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn softplus_tails_do_not_overflow() {
        assert!((softplus(800.0_f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0_f64) >= 0.0);
        assert!(softplus(-800.0_f64) < 1e-300);
    }

    #[test]
    fn softplus_inv_round_trips() {
        for t in [1e-6_f64, 0.1, 1.0, 5.0, 30.0, 100.0] {
            let raw = softplus_inv(t);
            assert!((softplus(raw) - t).abs() <= 1e-12 * t.max(1.0), "t={t}");
        }
    }

    #[test]
    fn sigmoid_is_softplus_slope() {
        for i in -20..=20 {
            let x = i as f64 * 0.7;
            let h = 1e-5;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((sigmoid(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn generic_over_f32() {
        let t: f32 = softplus(0.5413248546129181_f32);
        assert!((t - 1.0).abs() < 1e-6);
    }
}
