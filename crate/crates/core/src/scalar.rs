use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point type the numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`. Statistical distribution functions
/// (p-values, quantiles) are always evaluated in `f64` and converted back.
pub trait Scalar:
    Float
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
    /// Converts an `f64` literal; panics only for values the type cannot hold.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sum of a slice, accumulated left to right.
pub fn sum<F: Scalar>(xs: &[F]) -> F {
    xs.iter().fold(F::zero(), |acc, &x| acc + x)
}

pub fn mean<F: Scalar>(xs: &[F]) -> F {
    if xs.is_empty() {
        return F::zero();
    }
    sum(xs) / F::count(xs.len())
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_sd<F: Scalar>(xs: &[F]) -> F {
    if xs.len() < 2 {
        return F::zero();
    }
    let m = mean(xs);
    let ss = xs.iter().fold(F::zero(), |acc, &x| acc + (x - m) * (x - m));
    (ss / F::count(xs.len() - 1)).sqrt()
}
