//! Semantic action flow pipeline on a synthetic two-domain manipulation world.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`envsim`] — deterministic 2D world, scripted experts, rendering, oracles
//! - [`flowtrace`] — entity grounding and point tracking (the raw flow)
//! - [`flowencode`] — amplification mask, frame amplification, frozen encoding
//! - [`policymodel`] — the multimodal transformer with query-token heads
//! - [`trainer`] — pretraining / finetuning losses, schedules, gradient checks
//! - [`evalharness`] — chained-subtask evaluation, ablations, data scaling
//!
//! Supporting modules: [`container`] (named-array files), [`dataset`] (episode
//! directories and manifests), [`config`] (layered run configuration), [`nn`]
//! (the small tensor/backprop substrate everything above is built on).

pub mod config;
pub mod container;
pub mod dataset;
pub mod envsim;
pub mod error;
pub mod evalharness;
pub mod flowencode;
pub mod flowtrace;
pub mod nn;
pub mod policymodel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Version stamp for the flow-extraction pipeline; recorded in episode
/// metadata and checkpoints, checked on load.
pub const PIPELINE_VERSION: u32 = 1;
/// Version stamp for the synthetic environment (layouts, glyphs, palettes).
pub const ENV_VERSION: u32 = 1;
/// Version stamp for the episode container format.
pub const FORMAT_VERSION: u32 = 1;
