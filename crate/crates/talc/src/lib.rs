//! Multi-scene text-to-video diffusion toolkit.
//!
//! Implements a pixel-space video diffusion model with three multi-scene
//! conditioning strategies: time-aligned captions (TALC), merged captions,
//! and merged videos. It ships the supporting pieces too: a minimal
//! reverse-mode autodiff tensor engine, a DDPM noise schedule with ancestral
//! sampling, a word-level text encoder, a training loop, a scene-cut /
//! captioning data pipeline, a synthetic moving-shape corpus generator, and
//! a three-level {0, 0.5, 1} evaluation protocol with scenario and
//! scene-count roll-ups.

pub mod checkpoint;
pub mod client;
pub mod conditioning;
pub mod datapipe;
pub mod denoiser;
pub mod error;
pub mod evaluator;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod textenc;
pub mod trainer;
pub mod video;

pub use error::{Result, TalcError};
