//! Scalar abstraction shared by the geometry, metric and correlation code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the numeric code is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Infallible for both supported types.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Snaps `v` to the nearest integer when it lies within `tol` of it.
///
/// Pixel and lattice coordinates computed through an affine map pick up
/// rounding noise (`0.3 / 0.1 == 2.9999999999999996`); floor/ceil on the raw
/// value would then include a spurious extra row or column.
pub fn snap<T: Scalar>(v: T, tol: T) -> T {
    let r = v.round();
    if (v - r).abs() <= tol {
        r
    } else {
        v
    }
}

/// Mean with a shift by the first element, exact for constant input.
pub fn shifted_mean<T: Scalar>(values: &[T]) -> Option<T> {
    let first = *values.first()?;
    let n = T::from_count(values.len());
    let acc: T = values.iter().map(|&v| v - first).sum();
    Some(first + acc / n)
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std<T: Scalar>(values: &[T]) -> T {
    if values.len() < 2 {
        return T::zero();
    }
    let mean = shifted_mean(values).unwrap_or_else(T::zero);
    let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    (ss / T::from_count(values.len() - 1)).sqrt()
}

/// Percentile by linear interpolation between closest ranks (`q` in `[0, 100]`).
pub fn percentile<T: Scalar>(sorted: &[T], q: T) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let last = sorted.len() - 1;
    let pos = q / T::lit(100.0) * T::from_count(last);
    let lo = pos.floor().to_usize().unwrap_or(0).min(last);
    let hi = pos.ceil().to_usize().unwrap_or(0).min(last);
    let frac = pos - T::from_count(lo);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}
