//! Static feature caching: policy, keyed feature store, and counters.
//!
//! The policy recomputes the attention and MLP sublayers whenever the
//! 0-based elapsed-step counter is divisible by the cache interval N, and
//! reuses the stored features on every other step. Step 0 therefore always
//! recomputes, so a correct policy can never hit an empty slot.
//!
//! The decision is keyed on the elapsed-step counter rather than the raw
//! diffusion timestep: with strided substeps the timestep values need not
//! hit multiples of N, while the elapsed counter guarantees both the
//! first-step recompute and the exact N-step cycle.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// When features are recomputed: never reused (`Off`) or every N steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    /// Recompute every step; the store is never written or read.
    Off,
    /// Recompute when `elapsed_step % interval == 0`, reuse otherwise.
    /// Valid intervals are 1..=T-1 for a T-step run.
    Static { interval: usize },
}

impl CachePolicy {
    pub fn interval(&self) -> Option<usize> {
        match self {
            CachePolicy::Off => None,
            CachePolicy::Static { interval } => Some(*interval),
        }
    }

    /// Checks `1 <= N <= steps-1` for static policies.
    pub fn validate(&self, steps: usize) -> Result<()> {
        if let CachePolicy::Static { interval } = self {
            if *interval < 1 || *interval > steps.saturating_sub(1) {
                return Err(Error::Usage(format!(
                    "cache interval must be an integer in 1..={} for {steps} sampling steps, got {interval}",
                    steps.saturating_sub(1),
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CachePolicy::Off => write!(f, "none"),
            CachePolicy::Static { interval } => write!(f, "static:{interval}"),
        }
    }
}

/// Guidance branch a forward pass belongs to. The two branches never share
/// cache slots because their conditioning differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Cond,
    Uncond,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Cond, Branch::Uncond];

    fn index(self) -> usize {
        match self {
            Branch::Cond => 0,
            Branch::Uncond => 1,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Cond => write!(f, "cond"),
            Branch::Uncond => write!(f, "uncond"),
        }
    }
}

/// Which sublayer of a block a cached feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sublayer {
    Attn,
    Mlp,
}

impl Sublayer {
    pub const ALL: [Sublayer; 2] = [Sublayer::Attn, Sublayer::Mlp];

    fn index(self) -> usize {
        match self {
            Sublayer::Attn => 0,
            Sublayer::Mlp => 1,
        }
    }
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sublayer::Attn => write!(f, "attn"),
            Sublayer::Mlp => write!(f, "mlp"),
        }
    }
}

/// Which tensor is cached and reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CachePoint {
    /// The branch contribution added to the residual stream (gate applied).
    #[serde(rename = "post-gate")]
    PostGate,
    /// The raw sublayer output; the current step's gate is applied on reuse.
    #[serde(rename = "pre-gate")]
    PreGate,
}

impl fmt::Display for CachePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CachePoint::PostGate => write!(f, "post-gate"),
            CachePoint::PreGate => write!(f, "pre-gate"),
        }
    }
}

/// How sublayer executions are counted when guidance runs two branches.
///
/// `Batched` counts one call per layer per sampling step (the two guidance
/// branches execute in lockstep and count as one pass, matching per-layer
/// per-step work units). `Split` counts each branch separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountingMode {
    Batched,
    Split,
}

impl CountingMode {
    /// Sublayer calls recorded per recompute step per layer.
    pub fn branch_factor(self) -> u64 {
        match self {
            CountingMode::Batched => 1,
            CountingMode::Split => 2,
        }
    }
}

impl fmt::Display for CountingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CountingMode::Batched => write!(f, "batched"),
            CountingMode::Split => write!(f, "split"),
        }
    }
}

/// True when this elapsed step must run the full forward pass.
pub fn should_recompute(elapsed_step: usize, policy: &CachePolicy) -> bool {
    match policy {
        CachePolicy::Off => true,
        CachePolicy::Static { interval } => elapsed_step % interval == 0,
    }
}

/// Feature store for one sampling run: one slot per
/// (branch, sublayer, layer), plus the elapsed-step counter.
#[derive(Debug, Clone)]
pub struct CacheStore {
    depth: usize,
    slots: Vec<Option<Tensor>>,
    elapsed_steps: usize,
}

impl CacheStore {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            slots: vec![None; 2 * 2 * depth],
            elapsed_steps: 0,
        }
    }

    fn slot_index(&self, branch: Branch, sublayer: Sublayer, layer: usize) -> usize {
        debug_assert!(layer < self.depth);
        (branch.index() * 2 + sublayer.index()) * self.depth + layer
    }

    /// Overwrite the slot; previous content is discarded.
    pub fn store(&mut self, branch: Branch, sublayer: Sublayer, layer: usize, feature: Tensor) {
        let idx = self.slot_index(branch, sublayer, layer);
        self.slots[idx] = Some(feature);
    }

    /// Read a slot written earlier this run. An empty slot is a policy bug,
    /// reported with the full key and the elapsed step.
    pub fn fetch(&self, branch: Branch, sublayer: Sublayer, layer: usize) -> Result<&Tensor> {
        let idx = self.slot_index(branch, sublayer, layer);
        self.slots[idx].as_ref().ok_or(Error::CacheMiss {
            branch,
            sublayer,
            layer,
            step: self.elapsed_steps,
        })
    }

    /// True when the slot has been written this run (used by tests to check
    /// branch namespaces stay disjoint).
    pub fn is_written(&self, branch: Branch, sublayer: Sublayer, layer: usize) -> bool {
        self.slots[self.slot_index(branch, sublayer, layer)].is_some()
    }

    pub fn elapsed_steps(&self) -> usize {
        self.elapsed_steps
    }

    /// Advance the elapsed-step counter after a sampling step completes.
    pub fn step_completed(&mut self) {
        self.elapsed_steps += 1;
    }
}

/// Decision taken for one sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Recompute,
    Reuse,
}

/// Work counters for one sampling run.
#[derive(Debug, Clone, Default)]
pub struct CacheStats {
    /// Steps that executed the full forward pass.
    pub recompute_events: usize,
    /// Steps that reused cached features.
    pub reuse_events: usize,
    /// Attention operator executions (in `CountingMode` units).
    pub attn_calls: u64,
    /// MLP operator executions (in `CountingMode` units).
    pub mlp_calls: u64,
    /// Per-step decision log; `true` means recompute.
    pub decisions: Vec<bool>,
}

impl CacheStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record the step-level decision (once per step, not per slot).
    pub fn record_step(&mut self, decision: Decision) {
        match decision {
            Decision::Recompute => self.recompute_events += 1,
            Decision::Reuse => self.reuse_events += 1,
        }
        self.decisions.push(decision == Decision::Recompute);
    }

    /// Check the counter laws for a completed run:
    /// `recompute + reuse == steps` and
    /// `attn_calls == mlp_calls == recompute * depth * branch_factor`.
    pub fn validate(&self, steps: usize, depth: usize, counting: CountingMode) -> Result<()> {
        if self.recompute_events + self.reuse_events != steps {
            return Err(Error::Property(format!(
                "recompute_events ({}) + reuse_events ({}) != steps ({steps})",
                self.recompute_events, self.reuse_events
            )));
        }
        let expected = self.recompute_events as u64 * depth as u64 * counting.branch_factor();
        if self.attn_calls != expected || self.mlp_calls != expected {
            return Err(Error::Property(format!(
                "sublayer calls (attn {}, mlp {}) != recompute_events * depth * branch_factor ({expected})",
                self.attn_calls, self.mlp_calls
            )));
        }
        Ok(())
    }
}

/// Nominal recomputation percentage `100 / N`, rounded to one decimal
/// (the reporting convention for cache-interval tables).
pub fn recomp_percent_nominal(interval: usize) -> f64 {
    assert!(interval >= 1);
    (100.0 / interval as f64 * 10.0).round() / 10.0
}

/// Exact recomputation percentage `100 * ceil(T/N) / T`: the fraction of
/// steps whose 0-based index is divisible by N.
pub fn recomp_percent_exact(steps: usize, interval: usize) -> f64 {
    assert!(interval >= 1 && interval <= steps.saturating_sub(1).max(1));
    100.0 * steps.div_ceil(interval) as f64 / steps as f64
}

/// Baseline per-layer computation count: steps x depth.
pub fn origcomp(steps: usize, depth: usize) -> u64 {
    steps as u64 * depth as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_zero_always_recomputes() {
        for n in [1, 2, 3, 7, 100] {
            assert!(should_recompute(0, &CachePolicy::Static { interval: n }));
        }
        assert!(should_recompute(0, &CachePolicy::Off));
    }

    #[test]
    fn interval_one_always_recomputes() {
        for step in 0..50 {
            assert!(should_recompute(step, &CachePolicy::Static { interval: 1 }));
        }
    }

    #[test]
    fn interval_three_schedule() {
        let policy = CachePolicy::Static { interval: 3 };
        let got: Vec<bool> = (0..9).map(|s| should_recompute(s, &policy)).collect();
        let want = [true, false, false, true, false, false, true, false, false];
        assert_eq!(got, want);
    }

    #[test]
    fn store_fetch_roundtrip_and_overwrite() {
        let mut store = CacheStore::new(4);
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        store.store(Branch::Cond, Sublayer::Attn, 3, a.clone());
        assert!(store
            .fetch(Branch::Cond, Sublayer::Attn, 3)
            .unwrap()
            .bitwise_eq(&a));
        store.store(Branch::Cond, Sublayer::Attn, 3, b.clone());
        assert!(store
            .fetch(Branch::Cond, Sublayer::Attn, 3)
            .unwrap()
            .bitwise_eq(&b));
    }

    #[test]
    fn branch_slots_are_disjoint() {
        let mut store = CacheStore::new(4);
        let a = Tensor::new(vec![1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![2.0]).unwrap();
        store.store(Branch::Cond, Sublayer::Attn, 3, a.clone());
        store.store(Branch::Uncond, Sublayer::Attn, 3, b.clone());
        assert!(store
            .fetch(Branch::Cond, Sublayer::Attn, 3)
            .unwrap()
            .bitwise_eq(&a));
        assert!(store
            .fetch(Branch::Uncond, Sublayer::Attn, 3)
            .unwrap()
            .bitwise_eq(&b));
    }

    #[test]
    fn fetch_before_store_is_cache_miss() {
        let store = CacheStore::new(2);
        let err = store.fetch(Branch::Cond, Sublayer::Mlp, 1).unwrap_err();
        assert!(matches!(err, Error::CacheMiss { layer: 1, .. }));
    }

    #[test]
    fn full_run_with_valid_policy_never_misses() {
        // Simulated run: store on recompute steps, fetch on reuse steps.
        let policy = CachePolicy::Static { interval: 2 };
        let mut store = CacheStore::new(3);
        let feat = Tensor::new(vec![1], vec![0.5]).unwrap();
        for step in 0..10 {
            if should_recompute(step, &policy) {
                for branch in Branch::ALL {
                    for sublayer in Sublayer::ALL {
                        for k in 0..3 {
                            store.store(branch, sublayer, k, feat.clone());
                        }
                    }
                }
            } else {
                for branch in Branch::ALL {
                    for sublayer in Sublayer::ALL {
                        for k in 0..3 {
                            store.fetch(branch, sublayer, k).unwrap();
                        }
                    }
                }
            }
            store.step_completed();
        }
    }

    #[test]
    fn nominal_percent_table_values() {
        assert_eq!(recomp_percent_nominal(2), 50.0);
        assert_eq!(recomp_percent_nominal(3), 33.3);
        assert_eq!(recomp_percent_nominal(6), 16.7);
    }

    #[test]
    fn exact_percent_values() {
        assert_eq!(recomp_percent_exact(100, 2), 50.0);
        assert_eq!(recomp_percent_exact(100, 3), 34.0);
        assert!((recomp_percent_exact(250, 3) - 33.6).abs() < 1e-9);
    }

    #[test]
    fn origcomp_values() {
        assert_eq!(origcomp(100, 28), 2800);
        assert_eq!(origcomp(250, 28), 7000);
        assert_eq!(origcomp(500, 28), 14000);
    }

    #[test]
    fn policy_validation_bounds() {
        assert!(CachePolicy::Static { interval: 1 }.validate(10).is_ok());
        assert!(CachePolicy::Static { interval: 9 }.validate(10).is_ok());
        assert!(CachePolicy::Static { interval: 10 }.validate(10).is_err());
        assert!(CachePolicy::Static { interval: 0 }.validate(10).is_err());
        assert!(CachePolicy::Off.validate(10).is_ok());
    }

    #[test]
    fn stats_validation() {
        let mut stats = CacheStats::new();
        for step in 0..10 {
            stats.record_step(if step % 2 == 0 {
                Decision::Recompute
            } else {
                Decision::Reuse
            });
        }
        stats.attn_calls = 5 * 4;
        stats.mlp_calls = 5 * 4;
        stats.validate(10, 4, CountingMode::Batched).unwrap();
        assert!(stats.validate(10, 4, CountingMode::Split).is_err());
        stats.attn_calls += 1;
        assert!(stats.validate(10, 4, CountingMode::Batched).is_err());
    }
}
