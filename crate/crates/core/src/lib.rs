pub mod adversary;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod latent;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod quantizer;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
