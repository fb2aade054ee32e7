//! Error types shared across the engine.

use crate::cache::{Branch, Sublayer};

/// All errors produced by the engine, grouped by what went wrong rather
/// than by module.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors had incompatible shapes for the requested operation.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A tensor constructor or loader received an inconsistent shape.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A configuration document or derived setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A runtime input (label, layer index, ...) is out of range.
    #[error("input error: {0}")]
    Input(String),

    /// A command was invoked with arguments that violate a precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Reuse was requested for a slot that was never written this run.
    /// This is unreachable under a valid policy; seeing it means the
    /// recompute/reuse decision logic is broken.
    #[error(
        "cache miss: empty slot ({branch}, {sublayer}, layer {layer}) at elapsed step {step}"
    )]
    CacheMiss {
        branch: Branch,
        sublayer: Sublayer,
        layer: usize,
        step: usize,
    },

    /// A numeric argument left the valid domain (e.g. non-positive alpha-bar).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A latent cannot be arranged into the requested image layout.
    #[error("layout error: {0}")]
    Layout(String),

    /// A feature trace is missing entries or was asked for one it lacks.
    #[error("trace error: {0}")]
    Trace(String),

    /// A file failed integrity or structural checks on load.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// A file was written by an incompatible format version.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// An internal consistency law failed; this aborts the operation that
    /// detected it.
    #[error("property violation: {0}")]
    Property(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
