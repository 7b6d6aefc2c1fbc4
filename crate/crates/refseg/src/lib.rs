//! Referring image segmentation with cross-modal progressive comprehension
//! (entity perception + relation-aware graph reasoning) and text-guided
//! feature exchange across three feature levels, fused by a ConvLSTM.
//!
//! The whole stack runs on [`tapegrad`], a from-scratch f64 autodiff
//! engine, and trains end-to-end on a procedurally generated benchmark of
//! colored shapes described by typed referring expressions ("the red
//! square left of the blue circle"). Everything is deterministic given a
//! seed: dataset bytes, initialization, training traces, and checkpoints.
//!
//! Entry points:
//! - [`synth::build_dataset`] / [`synth::Dataset`]: data generation and loading,
//! - [`model::Model`]: construction, forward, loss, prediction,
//! - [`train::train`], [`eval::evaluate`], [`infer::infer`], [`sweep::sweep`],
//! - the `refseg` binary wires these into `gen | train | eval | infer | sweep`.
//!
//! See the crate's `examples/` directory for one runnable walkthrough per
//! capability.

pub mod checkpoint;
pub mod cmpc;
pub mod config;
pub mod error;
pub mod eval;
pub mod head;
mod init;
pub mod infer;
pub mod lang;
pub mod metrics;
pub mod model;
pub mod pnm;
pub mod sweep;
pub mod synth;
pub mod tgfe;
pub mod train;
pub mod vis;
pub mod vocab;

pub use config::RunConfig;
pub use error::{RefsegError, Result};
pub use model::Model;
pub use vocab::Vocabulary;
