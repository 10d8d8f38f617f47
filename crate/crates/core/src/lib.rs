//! Two-stage LDR image enhancement.
//!
//! Stage one ([`restorer`]) corrects color and brightness at 1/8 resolution
//! with windowed self-attention. Stage two ([`sagiri`]) refines the result in
//! the latent space of a small VAE with a control-conditioned denoiser and
//! masked DDPM sampling that keeps well-exposed regions and regenerates the
//! clipped ones.

pub mod error;
pub mod imaging;
pub mod losses;
pub mod nn;
pub mod checkpoint;
pub mod restorer;
pub mod diffusion;
pub mod sagiri;
pub mod training;
pub mod evaluation;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
