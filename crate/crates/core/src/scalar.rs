//! Scalar abstraction shared by the `f64` path and forward-mode dual numbers.

use nalgebra::{DMatrix, DVector, RealField};
use num_dual::Dual64;

/// Real scalar usable in every closed-form computation of the crate.
///
/// Implemented for `f64` and for [`Dual64`], so the same code yields
/// exact directional derivatives.
pub trait Real: RealField + Copy {
    /// Value part.
    fn re(&self) -> f64;
    /// Size used by convergence tests; includes the derivative part for duals.
    fn mag(&self) -> f64;
}

impl Real for f64 {
    fn re(&self) -> f64 {
        *self
    }
    fn mag(&self) -> f64 {
        self.abs()
    }
}

impl Real for Dual64 {
    fn re(&self) -> f64 {
        self.re
    }
    fn mag(&self) -> f64 {
        self.re.abs() + self.eps.abs()
    }
}

/// Constant conversion.
#[inline]
pub fn c<T: Real>(v: f64) -> T {
    nalgebra::convert(v)
}

/// Lift an `f64` matrix.
pub fn lift_m<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(c)
}

/// Lift an `f64` vector.
pub fn lift_v<T: Real>(v: &DVector<f64>) -> DVector<T> {
    v.map(c)
}

/// Value part of a matrix.
pub fn re_m<T: Real>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|x| x.re())
}

/// Value part of a vector.
pub fn re_v<T: Real>(v: &DVector<T>) -> DVector<f64> {
    v.map(|x| x.re())
}

/// Largest `mag` over a matrix.
pub fn max_mag<T: Real>(m: &DMatrix<T>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.mag()))
}

/// Largest `mag` over a vector.
pub fn max_mag_v<T: Real>(v: &DVector<T>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.mag()))
}
