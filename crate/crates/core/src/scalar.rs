//! Scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};

/// Floating point scalars the autodiff graph and the metric kernels run on.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts a literal, panicking only if the type cannot hold an f64 approximation.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
