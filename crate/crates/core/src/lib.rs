//! Depth-parallel training of frame-based video networks.
//!
//! Two training engines share one set of modules:
//!
//! * **BP**: classical blocking backpropagation, where a frame occupies the
//!   whole network for a full update cycle of `2D - 1` computation steps.
//! * **Sideways**: every module works on every computation step. Forward
//!   activations and backward pseudo-gradients from different frames meet at
//!   each module, and the Jacobians are evaluated at whatever activation the
//!   module cached most recently.
//!
//! The [`pipeline`] module defines the step semantics. The [`executor`] runs
//! them either sequentially or with one thread per module, with bitwise
//! identical results. See the crate's `examples/` directory for runnable
//! entry points.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod executor;
pub mod network;
pub mod optimizer;
pub mod pipeline;
pub mod tensor;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use network::{build_autoencoder, build_simple_cnn, NetworkSpec};
pub use pipeline::{cycle_length, Episode, Mode};
pub use tensor::{Scalar, Tensor};
