//! tapegrad: a minimal dense-tensor engine with reverse-mode automatic
//! differentiation over 64-bit floats.
//!
//! The design favors verifiability over throughput tricks:
//! - every value is an immutable [`Tensor`] recorded on a [`Tape`],
//! - [`Tape::backward`] replays the tape once in reverse,
//! - all randomness flows through the seeded [`SplitMix64`] generator,
//!   so identical seeds give bitwise-identical results,
//! - [`check`] provides a finite-difference oracle for every gradient.

pub mod adam;
pub mod check;
pub mod error;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use error::{Result, TensorError};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use rng::{derive_seed, SplitMix64};
pub use tape::{Gradients, Tape, TensorRef};
pub use tensor::Tensor;
