//! Scalar abstraction so the tensor engine works for any float width.
//!
//! The training pipeline pins `f64` (see the crate-root aliases); `f32`
//! exists to keep the math honest about precision assumptions.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Floating-point element type of a tensor.
pub trait Scalar: Float + NumAssignOps + Sum + Debug + Display + 'static {
    /// Gauss error function, used by the exact (non-tanh) GELU.
    fn erf(self) -> Self;

    /// Converts an `f64` literal into this scalar type.
    fn lit(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> f64 {
        libm::erf(self)
    }

    #[inline]
    fn lit(v: f64) -> f64 {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> f32 {
        libm::erff(self)
    }

    #[inline]
    fn lit(v: f64) -> f32 {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Standard-normal CDF `Φ(x) = (1 + erf(x/√2)) / 2`.
#[inline]
pub fn norm_cdf<F: Scalar>(x: F) -> F {
    let half = F::lit(0.5);
    let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
    half * (F::one() + (x * inv_sqrt2).erf())
}

/// Standard-normal density `φ(x) = exp(-x²/2) / √(2π)`.
#[inline]
pub fn norm_pdf<F: Scalar>(x: F) -> F {
    let inv_sqrt_2pi = F::lit(0.3989422804014327);
    inv_sqrt_2pi * (-x * x * F::lit(0.5)).exp()
}
