use num_traits::{Float, FromPrimitive};

/// Scalar used by the differentiable stack. Training instantiates the
/// pipeline at `f32`; gradient-check mode runs the identical code at `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand conversion from an `f64` literal.
#[inline(always)]
pub fn r<R: Real>(v: f64) -> R {
    R::of(v)
}
