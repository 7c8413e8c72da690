//! Binary image segmentation with a conditional denoising-diffusion model.
//!
//! A UNet denoiser sees the RGB image, a noisy mask and a frozen-backbone
//! feature pyramid, and is trained to recover the clean mask. At test time
//! a few-step ODE solver turns pure noise into a segmentation.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patcher;
pub mod report;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
