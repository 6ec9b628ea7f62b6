//! A small reverse-mode automatic differentiation engine over dense row-major matrices.
//!
//! Operations are coarse grained (matrix products, masked row softmax, layer norm, a fused
//! LSTM pass) so that a sequence of a few hundred frames records a few hundred nodes rather
//! than tens of thousands. Every tensor is two dimensional; row vectors are `[1 × n]`.
//!
//! The engine is generic over [`Scalar`] so the same model code runs in `f32` for training and
//! in `f64` for finite-difference gradient verification.

mod graph;
mod params;

pub use graph::{AttnMask, Gradients, Graph, Mode, Var};
pub(crate) use graph::resample_plan;
pub use params::{Init, ParamBuilder, ParamId, ParamStore};

use ndarray::NdFloat;
use num_traits::FromPrimitive;

pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum + Default {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the working precision.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}
