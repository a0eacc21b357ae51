//! Kernel-prediction guided diffusion for image deblurring.
//!
//! A time-conditioned U-Net ([`lkpn`]) predicts a per-pixel, per-channel
//! filter bank from the current diffusion state and the blurry latent. The
//! filters are applied to the blurry latent by element-wise adaptive
//! convolution ([`eac`]); the result conditions a ControlNet-style denoiser
//! ([`diffusion`]) at every reverse step, and each new diffusion state feeds
//! back into the kernel predictor.

pub mod blur_synth;
pub mod checkpoint;
pub mod codec;
pub mod diffusion;
pub mod eac;
pub mod error;
pub mod imageio;
pub mod lkpn;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
