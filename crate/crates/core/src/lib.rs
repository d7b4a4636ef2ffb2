//! Distillation of masked-diffusion token models into one-step generators.
//!
//! The crate covers the transformer denoiser, the absorbing-state diffusion
//! process, the token-level divergences and their logit gradients, teacher
//! training on synthetic data, the distillation engine and exact
//! evaluation oracles.

pub mod diffusion;
pub mod distill;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod rng;
pub mod teacher;
pub mod tokens;

pub use error::{Error, Result};
pub use maskdistill_tensor as tensor;
pub use model::{Denoiser, Grid, ModelConfig, ModelParams};
pub use rng::StreamRng;
pub use tokens::{Condition, TokenSeq, Vocab};
