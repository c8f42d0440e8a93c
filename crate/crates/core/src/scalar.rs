//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps, NumCast};

/// Floating-point element type the whole stack is generic over.
///
/// `f32` is the working precision for model state; `f64` exists so gradient
/// checks can run the identical code path at higher precision.
pub trait Scalar:
    Float + NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    fn fromf(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 -> scalar cast")
    }

    fn tof(self) -> f64 {
        self.to_f64().expect("scalar -> f64 cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
