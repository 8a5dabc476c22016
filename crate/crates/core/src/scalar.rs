use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for tensors, parameters and the detector.
///
/// Implemented for `f32` (training and checkpoints) and `f64` (strict
/// gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a literal, panicking only if the target type cannot hold it.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts between scalar types through `f64`.
pub fn cast<A: Scalar, B: Scalar>(v: A) -> B {
    B::lit(v.to_f64_lossy())
}
