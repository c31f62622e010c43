//! Hybrid CNN-transformer adversarial synthesis of missing image modalities.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation.
//! - [`vit`]: the transformer used inside aggregated residual transformer blocks,
//!   plus attention rollout.
//! - [`generator`] and [`discriminator`]: the synthesis network and the
//!   availability-conditioned patch critic.
//! - [`trainer`]: objectives, Adam, learning-rate schedule and the two-phase
//!   training loop.
//! - [`data`], [`metrics`], [`checkpoint`]: file formats, the phantom corpus,
//!   and image quality evaluation.
//! - [`pipeline`]: inference, evaluation and rollout export used by the CLI.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
mod nn;
pub mod pipeline;
pub mod suite;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
