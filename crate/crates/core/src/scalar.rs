use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type of a [`Tensor`](crate::Tensor).
///
/// `f64` is the grad-check precision, `f32` the training precision.
pub trait Scalar:
    Float + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
