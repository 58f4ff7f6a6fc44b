pub mod autodiff;
pub mod baselines;
pub mod denoiser;
pub mod diffusion;
pub mod erasure;
mod error;
pub mod eval;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
