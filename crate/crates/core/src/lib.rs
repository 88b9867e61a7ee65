//! Low-rank clone distillation: a frozen teacher's weights are multiplied by
//! trainable low-rank projections to produce a smaller student, trained on a
//! mix of activation cloning, logit distillation and language modelling.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod model;
pub mod projection;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{LrcError, Result};
