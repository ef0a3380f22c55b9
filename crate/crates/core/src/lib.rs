//! Consistency models, their diffusion counterpart, and policy-gradient
//! fine-tuning of both against black-box rewards.

pub mod clock;
pub mod consistency;
pub mod diffusion;
pub mod error;
pub mod exp;
pub mod nn;
pub mod rewards;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
