//! Per-location information maps for few-shot image representations.
//!
//! The crate trains a small prototypical-network classifier on synthetic
//! episodes, freezes it, attaches trainable information estimators (a
//! contrastive lower bound and a variational Gaussian upper bound) plus a
//! learned per-location mask, and renders three per-location information
//! maps — total, decision-related, and redundant — as heatmaps.
//!
//! The numeric core ([`tensor`], [`tape`], [`optim`]) is generic over the
//! scalar type; the pipeline modules pin `f64` through the aliases below.

pub mod data;
pub mod error;
pub mod estimators;
pub mod gradcheck;
pub mod maps;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod protonet;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Var;

/// Pipeline-wide scalar: 64-bit reals remove precision ambiguity in the
/// KL and contrastive-bound tolerances.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type AdamConfig = optim::AdamConfig<f64>;
pub type AdamState = optim::AdamState<f64>;
