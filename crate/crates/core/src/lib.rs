//! Conditional Schrödinger-bridge refinement of coarse time-series forecasts.
//!
//! A prior forecast `x_T` (from a foundation model, a file, or a simple
//! baseline) is transported toward the observed future `x_0`, conditioned on
//! the context window. The crate contains the tensor kernel and tape, the
//! noise schedule, bridge sampling and loss, the encoder/U-Net networks, ODE
//! and SDE samplers, AdamW training with checkpoints, the data pipeline, and
//! the evaluation harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod networks;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use networks::{ModelConfig, RefineBridgeModel};
pub use parallel::Exec;
pub use schedule::Schedule;
pub use tensor::Tensor;
