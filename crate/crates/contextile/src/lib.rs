//! Masked-diffusion toolkit for panel-grid canvases.
//!
//! Reference panels and generation targets share one canvas; the forward
//! process, the loss, and the reverse initialization all act only on the
//! target region, so the clean context stays visible to the denoiser at
//! every step. A small conditional U-Net is pretrained on generic canvas
//! inpainting and then adapted per task through LoRA on its self-attention
//! projections.

pub mod denoiser;
pub mod error;
pub mod experiments;
pub mod layout;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
