//! Tensor numerics with reverse-mode automatic differentiation.
//!
//! Tensors are dense, row-major, flat `Vec` storage with an explicit shape.
//! Every differentiable operation records a node in a computation graph;
//! calling [`Tensor::backward`] on a scalar walks the graph in reverse
//! topological order and accumulates gradients into the leaf variables.
//!
//! Precision is generic over [`Element`] (`f32` or `f64`). Gradient-check
//! builds use `f64`; training uses `f32`.
//!
//! Broadcasting is deliberately restricted: elementwise ops require exactly
//! matching shapes, and the only implicit expansions are the dedicated bias
//! ops (`add_channel_bias`, `add_token_bias`, `add_sample_channel_bias`) and
//! scalar ops. Anything else is a dimension error, never a silent expansion.

mod backward;
mod gradcheck;
mod ops;
pub mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use tensor::{without_graph, Tensor};

use crate::error::{Error, Result};

/// Scalar element type for tensors: `f32` for training, `f64` for gradient
/// verification.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    fn minimum(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }
}

macro_rules! impl_element {
    ($t:ty, $name:literal) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32, "f32");
impl_element!(f64, "f64");

/// Number of elements implied by a shape.
pub fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn shape_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn check_same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!(
            "{op}: shapes must match exactly, got {a:?} vs {b:?}"
        )));
    }
    Ok(())
}
