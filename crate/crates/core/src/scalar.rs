//! Scalar abstraction: the numeric kernels are generic over the float type.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the library is generic over (`f32` or `f64`).
///
/// `nalgebra::RealField` supplies the elementary functions; the `num-traits`
/// bounds cover lossy conversion from/to `f64` literals and file formats.
pub trait Scalar: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 converts to any Scalar")
}
