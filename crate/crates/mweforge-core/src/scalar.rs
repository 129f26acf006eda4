use std::fmt::{Debug, Display};
use std::str::FromStr;

/// Scalar type the numeric core is generic over: `f32` or `f64`.
///
/// `Display`/`FromStr` are required so checkpoints round-trip through their
/// textual form bit-exactly (Rust prints the shortest decimal that parses
/// back to the same value).
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + FromStr + Default + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn from_f64_lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    /// Converts a count into this scalar type.
    fn from_usize_lit(n: usize) -> Self {
        Self::from_usize(n).expect("scalar conversion from usize")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
