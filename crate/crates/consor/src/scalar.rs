use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar the numeric core is generic over: f32 or f64.
///
/// Training typically runs in f32; gradient verification runs in f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from f64 (used for constants and RNG draws).
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant conversion")
    }
    /// Widening conversion to f64 for reporting and metrics.
    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}
