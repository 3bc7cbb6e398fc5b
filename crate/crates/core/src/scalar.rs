//! Scalar abstraction for the simplex, pruning and perturbation layers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the probability-simplex math is written against.
///
/// Implemented for `f32` and `f64`. The RL stack (policies, estimators) is
/// instantiated at `f64`.
pub trait Real:
    Float
    + FloatConst
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
    /// Tolerance used when validating that a vector lies on the simplex.
    const SIMPLEX_TOL: Self;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Real for f32 {
    const SIMPLEX_TOL: f32 = 1e-5;
}

impl Real for f64 {
    const SIMPLEX_TOL: f64 = 1e-12;
}
