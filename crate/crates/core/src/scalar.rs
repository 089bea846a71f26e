//! Scalar abstraction for the numeric kernels.
//!
//! Load math, imbalance ratios, forecasting, and attention are written
//! against [`Scalar`] so they run in either `f32` or `f64`. The simulator
//! and CLI use the `f64` instantiations re-exported at the crate root.

use std::fmt::{Debug, Display};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::NumCast + Debug + Display + Default
{
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to any Scalar")
    }

    /// Lossy conversion from `usize`.
    fn from_usize_lossy(v: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(v).expect("usize converts to any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
