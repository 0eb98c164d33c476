//! Deterministic dense arithmetic and seeded randomness.
//!
//! Everything here is generic over [`Scalar`] (`f32` or `f64`). The engine
//! itself runs on `f64`; see the aliases at the crate root.

mod rng;
mod scalar;
mod tensor;

pub use rng::{derive_seed, Rng};
pub use scalar::{DType, Scalar};
pub use tensor::{l2_norm, l2_norm_slice, ordered_sum, rel_diff, Tensor};
