//! Personalized text-to-image conditioning engine.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`store`]: prompt records, corpora and their on-disk format, plus a
//!   seeded synthetic generator.
//! - [`coreset`]: preference-weighted CLIP similarity and the greedy coreset
//!   sampler used for user profiling, with an independent reference oracle.
//! - [`guidance`]: per-condition decoupled softmax weighting controlled by a
//!   personalization degree and per-reference preference intensities.
//! - [`adapter`]: the cross-attention adapter stack with hand-derived
//!   reverse-mode gradients and a checkpoint format.
//! - [`trainer`]: reconstruction training with AdamW and a cosine schedule,
//!   plus finite-difference gradient checking.
//! - [`eval`]: the Text-align metric, sampling sweeps, ablations and alpha
//!   sweeps.

pub mod adapter;
pub mod coreset;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod rng;
pub mod store;
pub mod trainer;

pub use error::{DrumError, Result};
