//! Captured per-step sublayer features for cross-step similarity analysis.
//!
//! A trace records, for every sampling step, layer, sublayer, and guidance
//! branch, the feature tensor at the configured cache point — exactly the
//! tensor that caching would reuse. Tap modes: `full` flattens the whole
//! `[seq_len x dim]` branch output; `pooled` stores the per-feature mean
//! over tokens (f64 accumulation, rounded once to f32).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cache::{Branch, CachePoint, Sublayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a tapped feature tensor is reduced before storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapMode {
    Full,
    Pooled,
}

impl fmt::Display for TapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapMode::Full => write!(f, "full"),
            TapMode::Pooled => write!(f, "pooled"),
        }
    }
}

/// Full-flatten traces above this estimated size are refused; pooled mode
/// is the documented fallback.
pub const MAX_FULL_TRACE_BYTES: u64 = 64 * 1024 * 1024;

/// Per-run feature capture: one vector per
/// (step, layer, sublayer, branch). Complete after a finished run.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    steps: usize,
    depth: usize,
    mode: TapMode,
    feature_len: usize,
    policy: String,
    cache_point: CachePoint,
    entries: Vec<Option<Vec<f32>>>,
}

impl FeatureTrace {
    /// Estimated payload bytes for a full-mode trace of the given geometry.
    pub fn estimate_full_bytes(steps: usize, depth: usize, feature_len: usize) -> u64 {
        steps as u64 * depth as u64 * 4 * feature_len as u64 * 4
    }

    /// Build an empty trace, refusing full mode above the size bound.
    pub fn new(
        steps: usize,
        depth: usize,
        mode: TapMode,
        feature_len: usize,
        policy: String,
        cache_point: CachePoint,
    ) -> Result<Self> {
        if mode == TapMode::Full {
            let bytes = Self::estimate_full_bytes(steps, depth, feature_len);
            if bytes > MAX_FULL_TRACE_BYTES {
                return Err(Error::Trace(format!(
                    "full-flatten trace would need ~{} MB (> {} MB bound); use the pooled tap mode",
                    bytes / (1024 * 1024),
                    MAX_FULL_TRACE_BYTES / (1024 * 1024)
                )));
            }
        }
        Ok(Self {
            steps,
            depth,
            mode,
            feature_len,
            policy,
            cache_point,
            entries: vec![None; steps * depth * 4],
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn mode(&self) -> TapMode {
        self.mode
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    /// Policy string of the run that produced the trace (e.g. "static:5").
    pub fn policy(&self) -> &str {
        &self.policy
    }

    pub fn cache_point(&self) -> CachePoint {
        self.cache_point
    }

    fn index(&self, step: usize, layer: usize, sublayer: Sublayer, branch: Branch) -> usize {
        let sub = match sublayer {
            Sublayer::Attn => 0,
            Sublayer::Mlp => 1,
        };
        let br = match branch {
            Branch::Cond => 0,
            Branch::Uncond => 1,
        };
        ((step * self.depth + layer) * 2 + sub) * 2 + br
    }

    /// Record a feature tensor, reducing per the tap mode.
    pub fn record(
        &mut self,
        step: usize,
        layer: usize,
        sublayer: Sublayer,
        branch: Branch,
        feature: &Tensor,
    ) {
        let vec = match self.mode {
            TapMode::Full => feature.data().to_vec(),
            TapMode::Pooled => pool_rows(feature),
        };
        debug_assert_eq!(vec.len(), self.feature_len);
        let idx = self.index(step, layer, sublayer, branch);
        self.entries[idx] = Some(vec);
    }

    /// Raw storage write used by the trace file loader.
    pub(crate) fn insert_raw(
        &mut self,
        step: usize,
        layer: usize,
        sublayer: Sublayer,
        branch: Branch,
        data: Vec<f32>,
    ) {
        let idx = self.index(step, layer, sublayer, branch);
        self.entries[idx] = Some(data);
    }

    /// Fetch one recorded feature vector.
    pub fn get(
        &self,
        step: usize,
        layer: usize,
        sublayer: Sublayer,
        branch: Branch,
    ) -> Result<&[f32]> {
        if step >= self.steps || layer >= self.depth {
            return Err(Error::Input(format!(
                "trace lookup out of range: step {step} (of {}), layer {layer} (of {})",
                self.steps, self.depth
            )));
        }
        self.entries[self.index(step, layer, sublayer, branch)]
            .as_deref()
            .ok_or_else(|| {
                Error::Trace(format!(
                    "incomplete trace: missing entry (step {step}, layer {layer}, {sublayer}, {branch})"
                ))
            })
    }

    /// Verify every (step, layer, sublayer, branch) slot is filled.
    pub fn check_complete(&self) -> Result<()> {
        for step in 0..self.steps {
            for layer in 0..self.depth {
                for sublayer in Sublayer::ALL {
                    for branch in Branch::ALL {
                        self.get(step, layer, sublayer, branch)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// True when every recorded vector of `self` equals the corresponding
    /// vector of `other` bitwise.
    pub fn bitwise_eq(&self, other: &FeatureTrace) -> bool {
        self.steps == other.steps
            && self.depth == other.depth
            && self.feature_len == other.feature_len
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(x), Some(y)) => {
                    x.len() == y.len()
                        && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                }
                _ => false,
            })
    }
}

/// Mean over rows of a 2-D tensor: f64 column sums, one rounding to f32.
fn pool_rows(t: &Tensor) -> Vec<f32> {
    let rows = t.shape()[0];
    let cols = t.shape()[1];
    let mut sums = vec![0.0f64; cols];
    for r in 0..rows {
        for (s, &v) in sums.iter_mut().zip(t.row(r)) {
            *s += v as f64;
        }
    }
    sums.into_iter().map(|s| (s / rows as f64) as f32).collect()
}
