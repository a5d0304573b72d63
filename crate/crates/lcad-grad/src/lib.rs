//! f64 tensors with reverse-mode autodiff, sized for small vision models.
//!
//! The pieces: [`tensor::Tensor`] (shared dense storage), [`tape::Tape`]
//! (autodiff), [`ops`] (differentiable primitives), [`nn`] (named params and
//! layers), [`adam::Adam`], [`store`] (checkpoints), and [`fd`]
//! (finite-difference gradient checks).

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod adam;
pub mod fd;
pub mod nn;
pub mod ops;
pub mod store;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use nn::{Graph, ParamId, ParamStore};
pub use ops::PadMode;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
