//! Joint hierarchical GRU and temporal point-process model for session-based
//! recommendation and return-time prediction.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, ingestion and
//! the command line live in the `thrnn` companion crate.
//!
//! Module map:
//!
//! - [`pipeline`]: sessionization, repeat collapsing, length enforcement,
//!   gap bucketing and the per-user train/test split.
//! - [`tape`], [`nn`], [`optim`]: a small reverse-mode differentiation tape,
//!   GRU/linear/embedding layers on top of it, and Adam with parameter groups.
//! - [`point_process`]: intensity, conditional density, the exponentiated
//!   time loss and quadrature of the expected return time.
//! - [`model`], [`train`]: the joint model, its loss, training loop and
//!   inference.
//! - [`hawkes`]: per-user exponential-kernel Hawkes baselines.
//! - [`metrics`], [`evaluation`]: Recall@k, MRR@k, bucketed MAE and the
//!   evaluation harness shared by the model and all baselines.
//! - [`synthetic`]: corpus generators and sampling oracles.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod evaluation;
pub mod hawkes;
pub(crate) mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod point_process;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Thrnn};
pub use pipeline::{DatasetSplit, GapBucketizer, Session, UserHistory};
pub use point_process::{QuadratureConfig, TimeHeadParams, TimeLossConfig};
pub use tensor::Array2;

/// Seconds in one day, the default model time unit.
pub const SECONDS_PER_DAY: f64 = 86_400.0;
