use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar element type of every tensor: `f32` in normal runs, `f64` for
/// verification.
pub trait Real:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const NAME: &'static str;

    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
