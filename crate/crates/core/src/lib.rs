//! Deterministic fault-tolerance engine for pipeline- and data-parallel
//! training, with update-undo, logging-based replay, parallel replay,
//! selective-logging planning and an analytic training-time simulator.
//!
//! The numeric core ([`numerics`], [`optimizers`], [`model`]) is generic over
//! the scalar type. The distributed engine runs on `f64`; the aliases below
//! fix that choice.

pub mod cluster;
pub mod error;
pub mod model;
pub mod numerics;
pub mod optimizers;
pub mod planner;
pub mod pipeline;
pub mod recovery;
pub mod resilience;
pub mod scenario;
pub mod simtime;

pub use error::{Error, Result};

/// Engine tensor.
pub type Tensor = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type ParamBlock = optimizers::ParamBlock<f64>;
pub type ParamBlock32 = optimizers::ParamBlock<f32>;
pub type Stage = model::Stage<f64>;
/// Exact bubble fraction.
pub type BubbleRatio = num_rational::Ratio<u64>;
