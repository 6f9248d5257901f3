//! Scalar abstraction shared by the probability and metric code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar used for probabilities, confidences and rates.
///
/// Implemented for `f32` and `f64`. Models compute in `f64`; reports and
/// confidence statistics can be produced at either width.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `num / den`, or zero when the denominator is zero.
pub fn ratio<F: Scalar>(num: usize, den: usize) -> F {
    if den == 0 {
        F::zero()
    } else {
        F::from_count(num) / F::from_count(den)
    }
}

/// F-beta from precision and recall; zero when both are zero.
pub fn f_beta<F: Scalar>(precision: F, recall: F, beta: F) -> F {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den <= F::zero() {
        F::zero()
    } else {
        (F::one() + b2) * precision * recall / den
    }
}
