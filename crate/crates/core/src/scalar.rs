use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar used for tensor storage: `f32` or `f64`.
///
/// Reductions are carried out in `f64` regardless of the storage type, so
/// the trait exposes lossless-enough conversions in both directions.
pub trait Scalar: num_traits::Float + num_traits::FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// Size of one element on disk or in a checkpoint blob.
    const BYTES: usize;

    /// Create a constant from an `f64` literal.
    fn c(val: f64) -> Self;

    /// Widen to `f64`.
    fn real(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline(always)]
    fn c(val: f64) -> Self {
        val as f32
    }

    #[inline(always)]
    fn real(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline(always)]
    fn c(val: f64) -> Self {
        val
    }

    #[inline(always)]
    fn real(self) -> f64 {
        self
    }
}
