//! Small reverse-mode differentiation engine over dense row-major matrices.
//!
//! Values live on a [`Tape`] that is rebuilt for every forward pass.
//! Trainable state lives in a [`ParamStore`]; a forward pass pulls each
//! parameter onto the tape as a leaf, and [`Tape::backward`] returns
//! [`Gradients`] indexed by [`ParamId`].

mod gradcheck;
mod kernels;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, AdamConfig, Asgd, Optimizer, OptimizerKind, Sgd};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type: `f64` for verification, `f32` for training.
pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
