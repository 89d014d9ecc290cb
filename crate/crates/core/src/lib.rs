//! Dual-prompt, dual-branch text-guided lesion segmentation.
//!
//! A global transformer pathway conditioned on a size/location prompt and a
//! local U-Net pathway modulated by attribute prompts are fused into a
//! single segmentation head. The crate covers the full desk-scale stack:
//! prompt construction, both branches, semantic feature adjustment,
//! training, two-pass mask-free inference, synthetic phantom data, and the
//! evaluation protocol (metrics, folds, size bins, paired statistics,
//! overlays, Grad-CAM).

pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gfe;
pub mod lfe;
pub mod mask;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod runner;
pub mod sfa;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
