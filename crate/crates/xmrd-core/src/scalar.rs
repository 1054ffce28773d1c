//! Scalar abstraction shared by every numeric module.
//!
//! All numeric code is generic over [`Scalar`]; `f32` and `f64` are the two
//! supported instantiations. Concrete type aliases live at the crate root.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable in every numeric routine of this crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon scaled constant used as a convergence threshold by
    /// the iterative linear-algebra routines.
    fn convergence_tol() -> Self {
        Self::epsilon() * Self::from_f64(16.0).expect("small integer fits any float")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into `F`.
///
/// Panics only if `F` cannot represent any `f64` approximation of `v`,
/// which cannot happen for the supported types.
pub fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("f32/f64 can approximate any f64 constant")
}

/// Converts a `usize` count into `F` (exact for counts that fit the mantissa).
pub fn cast_usize<F: Scalar>(v: usize) -> F {
    F::from_usize(v).expect("sample and dimension counts fit in f32/f64")
}

/// Widens `F` to `f64` (exact for both supported scalar types).
pub fn to_f64<F: Scalar>(v: F) -> f64 {
    v.to_f64().expect("f32/f64 widen to f64")
}
