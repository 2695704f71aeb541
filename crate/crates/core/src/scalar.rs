//! Scalar abstraction over the floating-point element type.
//!
//! All numeric code is generic over [`Scalar`] so the same model runs in
//! f64 (the default, for oracle-grade reproducibility) or f32 (opt-in,
//! for speed). Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum<Self> + Send + Sync + Debug + Display + Default + 'static
{
    /// Short dtype tag recorded in checkpoints and configs.
    const DTYPE: &'static str;

    /// Row-sum tolerance when validating probability distributions of this
    /// element type (softmax rounding grows with vocabulary size).
    const DIST_TOL: f64;

    fn of_f64(x: f64) -> Self {
        Self::from_f64(x).expect("f64 -> scalar conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const DIST_TOL: f64 = 1e-4;
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const DIST_TOL: f64 = 1e-6;
}
