//! Minimal differentiable numeric core.
//!
//! [`Grid`] is a dense row-major f64 array. [`Tape`] records a forward pass
//! over the operations in [`ops`] and replays it in reverse to produce exact
//! gradients for the trainable entries of a [`ParamSet`]. [`finite_diff_grad`]
//! is the independent oracle used to check it.

mod gradcheck;
mod grid;
pub mod kernels;
pub mod nn;
pub mod ops;
mod optim;
mod params;
mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, GRAD_CHECK_FLOOR};
pub use grid::Grid;
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamEntry, ParamId, ParamSet};
pub use tape::{Tape, Var};
