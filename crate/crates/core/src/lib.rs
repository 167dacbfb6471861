//! Auto-regressive flow-matching sequence generation with group-relative
//! policy-optimization post-training, on synthetic dyadic motion data.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`synthdata`] — procedural two-party conversations with a controlled
//!    one-to-many listener mapping (the collapse trap), plus normalization
//!    and smoothing.
//! 2. [`motionvae`] — a transformer sequence VAE compressing motion frames
//!    into temporally downsampled continuous latents.
//! 3. [`arflow`] — the auto-regressive rectified-flow velocity model over
//!    those latents, conditioned on a multimodal prefix with shared-timeline
//!    rotary timestamps.
//! 4. [`samplers`] — ODE/SDE token samplers, classifier-free guidance with
//!    speak/listen gating, and sliding-window long-sequence inference.
//! 5. [`gdpo`] — post-training with grouped SDE rollouts, per-channel-group
//!    decoupled advantages, and a clipped surrogate with KL anchoring.
//! 6. [`metrics`] — VAD-gated evaluation metrics (dynamic deviations,
//!    Fréchet distances, diversity, correlation).
//! 7. [`pipeline`] — configs, the array container format, and orchestration
//!    used by the CLI.
//!
//! Everything runs on [`diffcore`], a small reverse-mode autodiff engine;
//! no external ML frameworks are involved.

pub mod arflow;
pub mod diffcore;
pub mod gdpo;
pub mod metrics;
pub mod motionvae;
pub mod nn;
pub mod error;
pub mod pipeline;
pub mod rng;
pub mod samplers;
pub mod synthdata;

pub use error::{Error, Result};
