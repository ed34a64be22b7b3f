//! Core of a W+-conditioned personalization diffusion model.
//!
//! Everything here is `no_std` + `alloc`: tensors and reverse-mode
//! differentiation, the W+ latent model, the visual mapping network, style
//! cross-attention, the toy denoiser, DDPM/DDIM, the fine-tuning loop and the
//! proxy metrics. File formats and the CLI live in the `pidiff` crate.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod params;
pub mod trainer;
pub mod vgm;
pub mod wplus;

pub use error::{Error, Result};
