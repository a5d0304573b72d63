//! Language-conditioned latent-diffusion colorization, desk scale.
//!
//! The pipeline: [`compression`] learns a luminance-guided autoencoder in
//! pixel space, [`denoiser`] predicts noise over latents with text
//! cross-attention and channel-extended convolutions, [`diffusion`] owns the
//! schedule / DDIM stepping / guidance, and [`instsample`] steers attention
//! maps toward instance contours while sampling. [`synthdata`] generates the
//! colored-shape benchmark, [`metrics`] scores it, and [`cli`] ties the
//! stages together.

pub mod cli;
pub mod compression;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod instsample;
pub mod metrics;
pub mod synthdata;
pub mod textenc;
pub mod train;

pub use error::{Error, Result};
