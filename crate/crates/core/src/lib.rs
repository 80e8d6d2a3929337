//! Multi-task dense prediction by latent regression.
//!
//! A task-token-conditioned UNet regresses task latents from image latents
//! (single stream). A second UNet then attends, per spatial location, to the
//! frozen single-stream features of every other task through a 1-to-N task
//! attention layer with attention-guided masking (multi stream). Training data
//! comes from a procedural generator of partially labeled two-frame scenes.

pub mod attention;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod store;
pub mod synth;
pub mod task;
pub mod task_codec;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use raster::{Annotation, LabelMap, Raster};
pub use task::TaskId;

/// Crate version plus `git describe` output when built from a checkout.
pub fn version() -> &'static str {
    env!("MTL_LAB_VERSION")
}
