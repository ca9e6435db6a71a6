//! Scalar abstraction for the numeric kernels.
//!
//! Signal, optics, motion and statistics routines are written against
//! [`Real`] so they run on `f32` and `f64` alike. Data containers and the
//! learning stack are `f64` throughout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point scalar used by the generic numeric kernels.
pub trait Real:
    Float + FloatConst + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the target cannot represent
    /// finite `f64` values at all, which does not happen for `f32`/`f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("representable count")
    }

    /// Machine-precision dependent tolerance: `10^exponent` clamped to a few ulps.
    #[inline]
    fn tol(exponent: i32) -> Self {
        let t = Self::lit(10f64.powi(exponent));
        t.max(Self::epsilon() * Self::lit(16.0))
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn mean<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}

/// Population variance (n denominator).
pub(crate) fn variance_pop<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::from_usize_lossy(xs.len())
}

/// Sample variance (n - 1 denominator).
pub(crate) fn variance_sample<T: Real>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::from_usize_lossy(xs.len() - 1)
}

/// Median of a copy of `xs`; NaN-free input assumed.
pub(crate) fn median<T: Real>(xs: &[T]) -> T {
    quantile(xs, T::lit(0.5))
}

/// Linear-interpolation quantile (type 7, the numpy default).
pub(crate) fn quantile<T: Real>(xs: &[T], q: T) -> T {
    if xs.is_empty() {
        return T::nan();
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    let pos = q * T::from_usize_lossy(v.len() - 1);
    let lo = pos.floor();
    let frac = pos - lo;
    let i = lo.to_usize().unwrap_or(0).min(v.len() - 1);
    let j = (i + 1).min(v.len() - 1);
    v[i] + (v[j] - v[i]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_numpy_type7() {
        let xs = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.25), 1.75);
        assert_eq!(median(&xs), 2.5);
        assert_eq!(quantile(&xs, 0.75), 3.25);
    }

    #[test]
    fn variances() {
        let xs = [2.0f32, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        assert!((variance_pop(&xs) - 4.0).abs() < 1e-6);
        assert!((variance_sample(&xs) - 32.0 / 7.0).abs() < 1e-5);
    }
}
