use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the numeric routines are written against: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and file data.
    fn of(value: f64) -> Self;

    /// Widening conversion used wherever accumulation happens in double precision.
    fn wide(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(value: f64) -> Self {
        value as f32
    }

    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(value: f64) -> Self {
        value
    }

    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// Euclidean norm accumulated in `f64`.
pub fn l2_norm<S: Scalar>(values: &[S]) -> f64 {
    values.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt()
}

/// Scales `values` to unit Euclidean norm in place. Zero vectors are left untouched.
/// Returns the norm before scaling.
pub fn l2_normalize<S: Scalar>(values: &mut [S]) -> f64 {
    let norm = l2_norm(values);
    if norm > 0.0 {
        for v in values.iter_mut() {
            *v = S::of(v.wide() / norm);
        }
    }
    norm
}

#[inline]
pub(crate) fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}
