//! Conditional flow-matching stack for video dubbing on a synthetic
//! audiovisual corpus.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of
//! its inputs and seeds; file formats, evaluation drivers, and the command-line
//! interface live in the `syncvoice` crate.
//!
//! Module map:
//!
//! * [`numcore`]: grids, a reverse-mode tape over the handful of operations the
//!   models need, parameter sets, Adam, and a finite-difference oracle.
//! * [`datamodel`]: mel/visual/text types, visual-to-mel alignment, the
//!   training mask sampler, and the seeded synthetic corpus.
//! * [`fusion`]: toy text encoder, visual adapters, and the text-visual fusion
//!   layer.
//! * [`speaker`]: the dual speaker encoder (frozen stand-in + learnable branch).
//! * [`fmtrain`]: the vector field estimator, masked flow-matching loss,
//!   stochastic condition masking, and the training loop.
//! * [`sampler`]: multi-condition guidance, Euler integration, inference modes.
//! * [`metrics`]: synchronization, speaker, and prosody metrics plus the
//!   guidance ablation.
#![no_std]
// `!(x > 0.0)` style checks reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

extern crate alloc;

pub mod datamodel;
pub mod error;
pub mod fmtrain;
pub mod fusion;
pub mod math;
pub mod metrics;
pub mod numcore;
pub mod rng;
pub mod sampler;
pub mod speaker;

pub use error::{Error, Result};
