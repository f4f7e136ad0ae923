//! Scalar abstraction shared by the numerical kernels.
//!
//! Every signal-processing routine in this crate is written against [`Real`]
//! so that the same code runs in `f32` (compact, for bulk windows) and `f64`
//! (the default used by the pipeline and all reference tests).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        // Every f64 is representable (possibly rounded) in f32/f64.
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_len(n: usize) -> Self {
        Self::from_usize(n).expect("length representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Real>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::from_len(xs.len()))
}
