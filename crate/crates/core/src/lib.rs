//! Desk-scale diffusion-transformer inference engine with static feature
//! caching.
//!
//! The engine samples from a toy class-conditional diffusion transformer
//! and can store each block's attention/MLP branch outputs every N steps,
//! reusing them in between. Around that sit full work accounting, a
//! benchmark harness, a cross-step feature-similarity analyzer, and
//! bit-exact file formats.
//!
//! Module map:
//! - [`tensor`]: deterministic f32 kernel and seeded random source
//! - [`model`]: the transformer denoiser with cache hooks and feature taps
//! - [`cache`]: caching policy, keyed store, and work counters
//! - [`sampler`]: noise schedule, reverse-process loop, guidance
//! - [`trace`] / [`analyzer`]: feature capture and similarity matrices
//! - [`bench`]: interval sweeps with timing and counter laws
//! - [`io`]: checkpoints, trace files, config documents, images
//! - [`verify`]: runnable property suites

pub mod analyzer;
pub mod bench;
pub mod cache;
pub mod error;
pub mod io;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
