//! Deterministic tensor core: dense tensors, tape-based reverse-mode
//! differentiation, parameters and the Adam optimizer.

mod adam;
pub mod kernels;
mod param;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::SamplePlan;
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{derive_seed, derive_seed_indexed, rng_from_seed, Rng};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
