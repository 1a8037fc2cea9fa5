//! Desk-scale laboratory for trigger-set model watermarking.
//!
//! The crate covers the full life cycle of a watermarked classifier:
//!
//! - [`data`] / [`model`]: a small-image classification substrate (procedural
//!   `shapes10` dataset, convolutional residual nets, checkpoints).
//! - [`diffusion`]: a minimal class-conditional denoising diffusion model.
//! - [`triggergen`]: synthesis of unrestricted adversarial examples (UAEs)
//!   from diffusion seeds and assembly of the pros/cons trigger bundle.
//! - [`embed`]: watermark embedding — the friendly-teacher recipe plus
//!   pattern, noise-label and trivial relabeling baselines.
//! - [`evade`]: trigger inversion, noise-label trigger inversion and sparse
//!   instance attacks that expose watermark shortcuts.
//! - [`remove`]: fine-pruning, black-box extraction, anomaly filtering,
//!   adversarial fine-tuning and randomized smoothing.
//! - [`verify`]: self-calibrated ownership verification.
//! - [`experiment`]: declarative experiment configs, reports and plots.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod evade;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod plot;
pub mod remove;
pub mod rng;
pub mod serve;
pub mod triggergen;
pub mod verify;

pub use error::{Error, Result};
