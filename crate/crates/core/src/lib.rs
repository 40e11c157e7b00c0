//! Text-aware one-step latent diffusion super-resolution at desk scale.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
