use std::fmt::Debug;

use num_traits::Float;

/// Element type of a [`Tensor`](super::Tensor).
///
/// Training runs on `f32`; gradient checks run the same code on `f64`.
/// Reductions always accumulate in `f64` regardless of the storage type.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
