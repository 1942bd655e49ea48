//! Probabilistic residual vector quantization and a Gaussian-mixture latent
//! language model at desk scale, with exact small-instance oracles.

pub mod error;
pub mod frontend;
pub mod harness;
pub mod latent_lm;
pub mod math;
pub mod meanfield;
pub mod optim;
pub mod quantizer;
pub mod rng;

pub use error::{Error, FormatError, Result};
