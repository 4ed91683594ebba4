//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, SubAssign};

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; panics only for non-representable values,
    /// which cannot happen for the finite constants used in this crate.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Dot product; f64 dispatches to the FMA kernel when available.
    fn vdot(a: &[Self], b: &[Self]) -> Self {
        crate::autodiff::kernels::dot_generic(a, b)
    }

    /// `out[i] += s * x[i]`; f64 dispatches to the FMA kernel.
    fn vaxpy(out: &mut [Self], s: Self, x: &[Self]) {
        crate::autodiff::kernels::axpy_generic(out, s, x)
    }
}

impl Scalar for f32 {}

impl Scalar for f64 {
    fn vdot(a: &[Self], b: &[Self]) -> Self {
        crate::autodiff::kernels::dot_f64(a, b)
    }

    fn vaxpy(out: &mut [Self], s: Self, x: &[Self]) {
        crate::autodiff::kernels::axpy_f64(out, s, x)
    }
}
