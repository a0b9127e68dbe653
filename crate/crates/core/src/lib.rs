//! Desk-scale training library for spiking-network knowledge distillation.
//!
//! The crate provides, bottom to top:
//! - [`tensor`] and [`tape`]: dense `f64` tensors and reverse-mode
//!   autodiff on an operation record rebuilt each forward pass.
//! - [`gradcheck`]: central finite differences for gradient validation.
//! - [`lif`] and [`network`]: leaky integrate-and-fire dynamics and the
//!   temporally unrolled spiking classifier.
//! - [`distill`]: per-timestep distillation objectives, including
//!   error-aware logit alignment and selective temporal alignment with all
//!   ablation variants.
//! - [`diagnostics`]: gradient-level measurements of how the objectives
//!   behave at erroneous, weakly correct, and correct timesteps.
//! - [`energy`]: synaptic-operation counting and energy estimates.
//! - [`data`], [`teacher`], [`optim`], [`train`]: synthetic datasets, the
//!   dense teacher, momentum descent with cosine decay, and training loops.
//! - [`config`], [`cli`], [`io`], [`rng`]: run configuration, the
//!   command-line front end, deterministic serialization, and seeded
//!   random streams.
//!
//! Every run is reproducible: one seed drives named random streams, all
//! reductions run in fixed order, and artifacts serialize floats with
//! 17 significant digits, so identical configurations produce
//! byte-identical outputs.

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod distill;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod lif;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
