pub mod attention;
pub mod autograd;
pub mod cli;
pub mod conv_block;
pub mod error;
pub mod gating;
pub mod harness;
pub mod model;
pub mod nn;
pub mod partition;
pub mod tensor;

pub use error::{Error, Result};
