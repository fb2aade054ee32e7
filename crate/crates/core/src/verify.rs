//! Runnable property suites: cache-equivalence, counter laws, and drift
//! monotonicity. Each suite returns a pass/fail result with a detail line
//! instead of erroring on failure; errors are reserved for invalid setups
//! (e.g. an interval that violates the policy bound, which the suites
//! refuse before doing any work).

use crate::bench::{par_indexed, worker_cap};
use crate::cache::CachePolicy;
use crate::error::Result;
use crate::model::Model;
use crate::sampler::{sample, SamplerConfig};

/// Outcome of one property suite.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn run(model: &Model, base: &SamplerConfig, policy: CachePolicy, seed: u64) -> Result<crate::sampler::RunOutput> {
    sample(
        model,
        &SamplerConfig {
            policy,
            seed,
            tap: None,
            ..base.clone()
        },
    )
}

/// Interval-1 caching must be bit-identical to no caching, for every seed
/// and step count given.
pub fn equivalence_suite(
    model: &Model,
    base: &SamplerConfig,
    step_counts: &[usize],
    seeds: &[u64],
) -> Result<PropertyResult> {
    let mut cases = Vec::new();
    for &steps in step_counts {
        CachePolicy::Static { interval: 1 }.validate(steps)?;
        for &seed in seeds {
            cases.push((steps, seed));
        }
    }
    let cap = worker_cap(cases.len());
    let outcomes = par_indexed(cases.len(), cap, |i| -> Result<bool> {
        let (steps, seed) = cases[i];
        let cfg = SamplerConfig {
            steps,
            ..base.clone()
        };
        let plain = run(model, &cfg, CachePolicy::Off, seed)?;
        let cached = run(model, &cfg, CachePolicy::Static { interval: 1 }, seed)?;
        Ok(plain.final_latent.bitwise_eq(&cached.final_latent))
    });
    let mut failures = 0;
    for outcome in outcomes {
        if !outcome? {
            failures += 1;
        }
    }
    Ok(PropertyResult {
        name: "equivalence(N=1)".into(),
        passed: failures == 0,
        detail: format!(
            "{} of {} (steps, seed) cases bit-identical",
            cases.len() - failures,
            cases.len()
        ),
    })
}

/// Exact counter laws over a (steps, interval) grid:
/// `recompute_events == ceil(T/N)`,
/// `attn_calls == mlp_calls == recompute_events * depth`, and
/// `recompute_events + reuse_events == T`.
pub fn counter_suite(
    model: &Model,
    base: &SamplerConfig,
    step_counts: &[usize],
    intervals: &[usize],
) -> Result<PropertyResult> {
    let mut cases = Vec::new();
    for &steps in step_counts {
        for &n in intervals {
            CachePolicy::Static { interval: n }.validate(steps)?;
            cases.push((steps, n));
        }
    }
    let cap = worker_cap(cases.len());
    let outcomes = par_indexed(cases.len(), cap, |i| -> Result<Option<String>> {
        let (steps, n) = cases[i];
        let cfg = SamplerConfig {
            steps,
            ..base.clone()
        };
        let out = run(model, &cfg, CachePolicy::Static { interval: n }, base.seed)?;
        let stats = &out.stats;
        let expected = steps.div_ceil(n);
        let depth = model.config.depth as u64;
        let factor = cfg.counting.branch_factor();
        let ok = stats.recompute_events == expected
            && stats.recompute_events + stats.reuse_events == steps
            && stats.attn_calls == expected as u64 * depth * factor
            && stats.mlp_calls == stats.attn_calls;
        Ok(if ok {
            None
        } else {
            Some(format!(
                "(T={steps}, N={n}): recompute={} reuse={} attn={} mlp={}",
                stats.recompute_events, stats.reuse_events, stats.attn_calls, stats.mlp_calls
            ))
        })
    });
    let mut failures = Vec::new();
    for outcome in outcomes {
        if let Some(msg) = outcome? {
            failures.push(msg);
        }
    }
    Ok(PropertyResult {
        name: "counter-law".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{} (steps, interval) cases exact", cases.len())
        } else {
            failures.join("; ")
        },
    })
}

/// Mean L2 drift between cached and uncached finals must be 0 at interval 1
/// and non-decreasing across the given intervals; any adjacent inversion
/// fails the suite.
pub fn drift_suite(
    model: &Model,
    base: &SamplerConfig,
    intervals: &[usize],
    seeds: &[u64],
) -> Result<PropertyResult> {
    for &n in intervals {
        CachePolicy::Static { interval: n }.validate(base.steps)?;
    }
    let cap = worker_cap(seeds.len());
    let per_seed = par_indexed(seeds.len(), cap, |i| -> Result<Vec<f64>> {
        let seed = seeds[i];
        let baseline = run(model, base, CachePolicy::Off, seed)?;
        let mut dists = Vec::with_capacity(intervals.len());
        for &n in intervals {
            let cached = run(model, base, CachePolicy::Static { interval: n }, seed)?;
            dists.push(cached.final_latent.l2_distance(&baseline.final_latent)?);
        }
        Ok(dists)
    });
    let mut sums = vec![0.0f64; intervals.len()];
    for outcome in per_seed {
        for (s, d) in sums.iter_mut().zip(outcome?) {
            *s += d;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / seeds.len() as f64).collect();

    let mut passed = true;
    let mut notes = Vec::new();
    if let Some(pos) = intervals.iter().position(|&n| n == 1) {
        if means[pos] != 0.0 {
            passed = false;
            notes.push(format!("drift at N=1 is {} (must be exactly 0)", means[pos]));
        }
    }
    for w in means.windows(2) {
        if w[1] < w[0] {
            passed = false;
            notes.push(format!("inversion: {} -> {}", w[0], w[1]));
        }
    }
    let summary = intervals
        .iter()
        .zip(&means)
        .map(|(n, m)| format!("N={n}: {m:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(PropertyResult {
        name: "drift-monotonicity".into(),
        passed,
        detail: if notes.is_empty() {
            format!("mean L2 over {} seeds: {summary}", seeds.len())
        } else {
            format!("{}; mean L2: {summary}", notes.join("; "))
        },
    })
}
