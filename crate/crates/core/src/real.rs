//! Scalar abstraction so the autodiff engine can run in 32-bit (training) or
//! 64-bit (gradient checks).

use core::fmt::Debug;
use core::ops::{AddAssign, MulAssign, SubAssign};
use num_traits::Float;

pub trait Real: Float + Debug + Default + AddAssign + SubAssign + MulAssign + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
