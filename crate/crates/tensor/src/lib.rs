//! Dense `f64` arrays, a reverse-mode autodiff tape, and the checkpoint
//! container used by the models.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
mod tape;

pub use array::Array;
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use tape::{Tape, Var};
