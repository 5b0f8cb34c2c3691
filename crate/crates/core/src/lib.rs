//! Desk-scale diffusion laboratory.
//!
//! The crate implements a small but complete text-to-image diffusion stack in
//! pixel space, built around one idea: conditioning a UNet on an extra image by
//! running that image through the *same* residual blocks as the noised image
//! (shared weights, separate activations) and letting the two token streams
//! attend jointly inside the attention blocks. No new weights are introduced by
//! the mechanism, and with no conditioned image the network is bit-identical to
//! the vanilla UNet.
//!
//! Layout:
//! - [`numerics`]: flat-storage tensors with reverse-mode autodiff and a
//!   finite-difference gradient checker.
//! - [`diffusion`]: noise schedules, forward noising, guidance, DDIM/DDPM
//!   samplers, init-image starts.
//! - [`unet`]: the pixel-space UNet (ResBlocks, attention, timestep embedding).
//! - [`xfuse`]: the dual-stream fusion forward pass and its introspection
//!   hooks.
//! - [`conditioning`]: retrieval index, training-source mixing, subject crops,
//!   affine augmentation, scene rendering.
//! - [`baselines`]: alternative conditioning mechanisms used for comparison.
//! - [`toydata`]: procedural sprite corpus, captions, deterministic joint
//!   embedder, subject-detection pipeline.
//! - [`metrics`]: distribution distance, alignment scores, benchmark harness.
//! - [`trainer`]: AdamW, LR schedule, training loop, checkpoints, warm starts.

pub mod baselines;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod toydata;
pub mod trainer;
pub mod unet;
pub mod xfuse;

pub use error::{Error, Result};
