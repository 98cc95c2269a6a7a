//! Scalar abstraction for the numeric core.
//!
//! The training pipeline (merger MLPs, shading, losses, optimizer) is
//! generic over [`Real`] so the same code runs in `f32` for production
//! training and in `f64` for finite-difference gradient verification.

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Real:
    Float + FromPrimitive + NumAssign + LinalgScalar + Send + Sync + std::fmt::Debug + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
