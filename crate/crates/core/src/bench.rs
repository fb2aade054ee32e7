//! Benchmark harness: cache-interval sweeps with work counters and
//! wall-clock timing.
//!
//! A sweep runs the no-cache baseline plus one static policy per requested
//! interval, all with the same seed. Per policy: one untimed warmup run
//! (which also validates the counter laws — a violation aborts the sweep),
//! then `reps` timed runs executed serially on this thread. Wall times are
//! summarized by median; speedups divide baseline medians by row medians.
//! Untimed warmups may run in parallel, capped by the `FORA_THREADS`
//! environment variable; timed runs never do.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use crate::cache::{recomp_percent_exact, recomp_percent_nominal, CachePolicy};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::sampler::{sample, SamplerConfig};

/// Estimated FLOPs per layer per forward pass, counting only the dense
/// products (multiply-accumulates doubled):
/// attention `2*(3*s*d^2 + s^2*d + s^2*d + s*d^2)`, MLP `2*(2*s*d^2*r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopEstimate {
    pub attn_per_layer: u64,
    pub mlp_per_layer: u64,
}

pub fn estimate_flops(config: &ModelConfig) -> FlopEstimate {
    let s = config.seq_len as u64;
    let d = config.dim as u64;
    let r = config.mlp_ratio as u64;
    FlopEstimate {
        attn_per_layer: 2 * (3 * s * d * d + s * s * d + s * s * d + s * d * d),
        mlp_per_layer: 2 * (2 * s * d * d * r),
    }
}

/// One policy's measurements within a sweep.
#[derive(Debug, Clone)]
pub struct BenchRow {
    /// "none" for the baseline, "static" otherwise.
    pub policy: String,
    pub interval: Option<usize>,
    pub recompute_events: usize,
    pub reuse_events: usize,
    pub attn_calls: u64,
    pub mlp_calls: u64,
    /// Executed sublayer FLOPs in counting-mode units.
    pub theoretical_flops: u64,
    pub recomp_nominal_pct: f64,
    pub recomp_exact_pct: f64,
    /// Median end-to-end wall time over the timed repetitions, seconds.
    pub wall_total_s: f64,
    pub wall_per_step_s: f64,
    /// Median cumulative model-forward time, seconds.
    pub forward_total_s: f64,
    pub speedup_end_to_end: f64,
    pub speedup_forward: f64,
    /// Theoretical work ratio `T / ceil(T/N)`; 1.0 for the baseline.
    pub work_ratio: f64,
}

/// Sweep settings echoed into every report.
#[derive(Debug, Clone)]
pub struct BenchEnv {
    pub model: ModelConfig,
    pub steps: usize,
    pub kind: String,
    pub cfg_scale: f32,
    pub label: u32,
    pub seeds: Vec<u64>,
    pub reps: usize,
    pub cache_point: String,
    pub counting: String,
    pub flops: FlopEstimate,
    pub timestamp: String,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub env: BenchEnv,
    pub rows: Vec<BenchRow>,
}

/// Fixed CSV column header for bench reports.
pub const CSV_HEADER: &str = "policy,interval,recompute_events,reuse_events,attn_calls,mlp_calls,theoretical_flops,recomp_nominal_pct,recomp_exact_pct,wall_total_s,wall_per_step_s,forward_total_s,speedup_end_to_end,speedup_forward,work_ratio";

/// Output format for `emit_table`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Text,
}

/// Worker cap for untimed parallel sweeps: the `FORA_THREADS` environment
/// variable when set, otherwise the available parallelism, never more than
/// `max_useful`.
pub fn worker_cap(max_useful: usize) -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("FORA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(hw);
    cap.min(max_useful).max(1)
}

/// Run `f(0..count)` on up to `cap` scoped worker threads and return the
/// results in index order.
pub(crate) fn par_indexed<T, F>(count: usize, cap: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if count == 0 {
        return Vec::new();
    }
    let workers = cap.min(count).max(1);
    if workers == 1 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut chunks: Vec<Vec<(usize, T)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= count {
                            break;
                        }
                        local.push((i, f(i)));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut indexed: Vec<(usize, T)> = chunks.drain(..).flatten().collect();
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, v)| v).collect()
}

fn median_secs(mut times: Vec<Duration>) -> f64 {
    times.sort();
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2].as_secs_f64()
    } else {
        (times[n / 2 - 1].as_secs_f64() + times[n / 2].as_secs_f64()) / 2.0
    }
}

/// Sweep the baseline plus each requested static interval.
///
/// Counter laws are asserted on the warmup run of every policy before any
/// timing happens; outputs of timed repetitions must be bit-identical to
/// the warmup output (same seed, same policy). An empty interval list
/// yields an empty report.
pub fn run_sweep(
    model: &Model,
    base: &SamplerConfig,
    intervals: &[usize],
    reps: usize,
) -> Result<BenchReport> {
    if reps < 3 {
        return Err(Error::Usage(format!(
            "benchmark repetitions must be >= 3, got {reps}"
        )));
    }
    for &n in intervals {
        CachePolicy::Static { interval: n }.validate(base.steps)?;
    }

    let flops = estimate_flops(&model.config);
    let env = BenchEnv {
        model: model.config.clone(),
        steps: base.steps,
        kind: base.kind.to_string(),
        cfg_scale: base.cfg_scale,
        label: base.label,
        seeds: vec![base.seed],
        reps,
        cache_point: base.cache_point.to_string(),
        counting: base.counting.to_string(),
        flops,
        timestamp: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
    };
    if intervals.is_empty() {
        return Ok(BenchReport {
            env,
            rows: Vec::new(),
        });
    }

    let mut policies = vec![CachePolicy::Off];
    policies.extend(
        intervals
            .iter()
            .map(|&n| CachePolicy::Static { interval: n }),
    );
    let run_cfg = |policy: CachePolicy| SamplerConfig {
        policy,
        tap: None,
        ..base.clone()
    };

    // Untimed warmups, parallel up to the worker cap. Counter laws are
    // checked here: a violation is a defect, not measurement noise.
    let cap = worker_cap(policies.len());
    let warmups = par_indexed(policies.len(), cap, |i| sample(model, &run_cfg(policies[i])));
    let mut reference = Vec::with_capacity(policies.len());
    let depth = model.config.depth;
    let steps = base.steps;
    for (policy, outcome) in policies.iter().zip(warmups) {
        let out = outcome?;
        out.stats.validate(steps, depth, base.counting)?;
        let expected_recomputes = match policy {
            CachePolicy::Off => steps,
            CachePolicy::Static { interval } => steps.div_ceil(*interval),
        };
        if out.stats.recompute_events != expected_recomputes {
            return Err(Error::Property(format!(
                "policy {policy}: recompute_events {} != ceil(T/N) {expected_recomputes}",
                out.stats.recompute_events
            )));
        }
        reference.push(out);
    }
    // Work law against the baseline, exact on integers:
    // calls_N * T == calls_base * ceil(T/N).
    let base_calls = reference[0].stats.attn_calls;
    for (policy, out) in policies.iter().zip(&reference).skip(1) {
        let ceil = steps.div_ceil(policy.interval().unwrap());
        if out.stats.attn_calls * steps as u64 != base_calls * ceil as u64 {
            return Err(Error::Property(format!(
                "policy {policy}: cached work fraction is not ceil(T/N)/T exactly"
            )));
        }
    }

    // Timed repetitions, strictly serial.
    let mut medians = Vec::with_capacity(policies.len());
    for (policy, warm) in policies.iter().zip(&reference) {
        let cfg = run_cfg(*policy);
        let mut walls = Vec::with_capacity(reps);
        let mut forwards = Vec::with_capacity(reps);
        for _ in 0..reps {
            let out = sample(model, &cfg)?;
            if !out.final_latent.bitwise_eq(&warm.final_latent) {
                return Err(Error::Property(format!(
                    "policy {policy}: repetition output differs from warmup output"
                )));
            }
            walls.push(out.wall);
            forwards.push(out.forward);
        }
        medians.push((median_secs(walls), median_secs(forwards)));
    }

    let (base_wall, base_forward) = medians[0];
    let mut rows = Vec::with_capacity(policies.len());
    for (i, policy) in policies.iter().enumerate() {
        let stats = &reference[i].stats;
        let (wall, forward) = medians[i];
        let (name, interval) = match policy {
            CachePolicy::Off => ("none".to_string(), None),
            CachePolicy::Static { interval } => ("static".to_string(), Some(*interval)),
        };
        let work_ratio = match interval {
            None => 1.0,
            Some(n) => steps as f64 / steps.div_ceil(n) as f64,
        };
        rows.push(BenchRow {
            policy: name,
            interval,
            recompute_events: stats.recompute_events,
            reuse_events: stats.reuse_events,
            attn_calls: stats.attn_calls,
            mlp_calls: stats.mlp_calls,
            theoretical_flops: stats.attn_calls * flops.attn_per_layer
                + stats.mlp_calls * flops.mlp_per_layer,
            recomp_nominal_pct: recomp_percent_nominal(interval.unwrap_or(1)),
            recomp_exact_pct: recomp_percent_exact(steps, interval.unwrap_or(1)),
            wall_total_s: wall,
            wall_per_step_s: wall / steps as f64,
            forward_total_s: forward,
            speedup_end_to_end: base_wall / wall,
            speedup_forward: base_forward / forward,
            work_ratio,
        });
    }
    Ok(BenchReport { env, rows })
}

fn env_comment_lines(report: &BenchReport) -> Vec<String> {
    let e = &report.env;
    let m = &e.model;
    let eps_overhead = report
        .rows
        .iter()
        .filter(|r| r.interval.is_some())
        .map(|r| r.speedup_forward / r.work_ratio - 1.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut lines = vec![
        "# fora bench report".to_string(),
        format!(
            "# model: seq_len={} dim={} depth={} heads={} mlp_ratio={} num_classes={} out_channels={}",
            m.seq_len, m.dim, m.depth, m.heads, m.mlp_ratio, m.num_classes, m.out_channels
        ),
        format!(
            "# sampler: kind={} steps={} cfg_scale={} label={}",
            e.kind, e.steps, e.cfg_scale, e.label
        ),
        format!(
            "# seeds: {}",
            e.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ),
        format!("# reps: {} (median reported, one untimed warmup per policy)", e.reps),
        format!("# cache_point: {}", e.cache_point),
        format!("# counting: {}", e.counting),
        format!(
            "# flops_per_layer: attn={} mlp={} (dense products only, MACs doubled)",
            e.flops.attn_per_layer, e.flops.mlp_per_layer
        ),
        "# units: theoretical_flops use counting-mode units; in batched mode one call covers both guidance branches".to_string(),
    ];
    if eps_overhead.is_finite() {
        lines.push(format!("# epsilon_overhead: {eps_overhead}"));
    }
    lines.push(format!("# timestamp: {}", e.timestamp));
    lines
}

fn row_fields(row: &BenchRow) -> Vec<String> {
    vec![
        row.policy.clone(),
        row.interval.map(|n| n.to_string()).unwrap_or_default(),
        row.recompute_events.to_string(),
        row.reuse_events.to_string(),
        row.attn_calls.to_string(),
        row.mlp_calls.to_string(),
        row.theoretical_flops.to_string(),
        format!("{:.1}", row.recomp_nominal_pct),
        format!("{:.1}", row.recomp_exact_pct),
        row.wall_total_s.to_string(),
        row.wall_per_step_s.to_string(),
        row.forward_total_s.to_string(),
        row.speedup_end_to_end.to_string(),
        row.speedup_forward.to_string(),
        row.work_ratio.to_string(),
    ]
}

/// Render a report as CSV or an aligned text table. Output is a pure
/// function of the report, so identical reports produce identical bytes.
pub fn emit_table(report: &BenchReport, format: TableFormat) -> String {
    let mut out = String::new();
    for line in env_comment_lines(report) {
        out.push_str(&line);
        out.push('\n');
    }
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    match format {
        TableFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for row in &report.rows {
                out.push_str(&row_fields(row).join(","));
                out.push('\n');
            }
        }
        TableFormat::Text => {
            let rows: Vec<Vec<String>> = report.rows.iter().map(row_fields).collect();
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for row in &rows {
                for (w, field) in widths.iter_mut().zip(row) {
                    *w = (*w).max(field.len());
                }
            }
            let mut line = String::new();
            for (h, w) in header.iter().zip(&widths) {
                line.push_str(&format!("{h:>w$} "));
            }
            out.push_str(line.trim_end());
            out.push('\n');
            for row in &rows {
                let mut line = String::new();
                for (field, w) in row.iter().zip(&widths) {
                    line.push_str(&format!("{field:>w$} "));
                }
                out.push_str(line.trim_end());
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::toy()
    }

    #[test]
    fn flops_match_per_matmul_oracle() {
        // Independent enumeration: 2*m*n*k per dense product.
        let cfg = toy();
        let (s, d, r, heads) = (
            cfg.seq_len as u64,
            cfg.dim as u64,
            cfg.mlp_ratio as u64,
            cfg.heads as u64,
        );
        let hd = d / heads;
        let qkv = 2 * s * d * (3 * d);
        let scores = heads * 2 * s * s * hd;
        let av = heads * 2 * s * s * hd;
        let proj = 2 * s * d * d;
        let mlp = 2 * s * d * (r * d) + 2 * s * (r * d) * d;
        let est = estimate_flops(&cfg);
        assert_eq!(est.attn_per_layer, qkv + scores + av + proj);
        assert_eq!(est.mlp_per_layer, mlp);
    }

    #[test]
    fn flops_scaling_laws() {
        let cfg = toy();
        let mut wider = cfg.clone();
        wider.dim *= 2;
        wider.heads *= 1;
        assert_eq!(
            estimate_flops(&wider).mlp_per_layer,
            4 * estimate_flops(&cfg).mlp_per_layer
        );
        let mut longer = cfg.clone();
        longer.seq_len *= 2;
        let s = cfg.seq_len as u64;
        let d = cfg.dim as u64;
        let quad_term = |c: &ModelConfig| {
            estimate_flops(c).attn_per_layer - 8 * c.seq_len as u64 * d * d
        };
        assert_eq!(quad_term(&longer), 4 * quad_term(&cfg));
        let _ = s;
    }

    fn canned_report() -> BenchReport {
        BenchReport {
            env: BenchEnv {
                model: toy(),
                steps: 100,
                kind: "ddim".into(),
                cfg_scale: 1.5,
                label: 0,
                seeds: vec![0],
                reps: 3,
                cache_point: "post-gate".into(),
                counting: "batched".into(),
                flops: estimate_flops(&toy()),
                timestamp: "2026-01-01T00:00:00Z".into(),
            },
            rows: vec![BenchRow {
                policy: "none".into(),
                interval: None,
                recompute_events: 100,
                reuse_events: 0,
                attn_calls: 1200,
                mlp_calls: 1200,
                theoretical_flops: 42,
                recomp_nominal_pct: 100.0,
                recomp_exact_pct: 100.0,
                wall_total_s: 1.25,
                wall_per_step_s: 0.0125,
                forward_total_s: 1.0,
                speedup_end_to_end: 1.0,
                speedup_forward: 1.0,
                work_ratio: 1.0,
            }],
        }
    }

    #[test]
    fn empty_interval_list_emits_header_only() {
        let mut report = canned_report();
        report.rows.clear();
        let table = emit_table(&report, TableFormat::Csv);
        let last = table.lines().last().unwrap();
        assert_eq!(last, CSV_HEADER);
    }

    #[test]
    fn emit_is_bitwise_stable() {
        let report = canned_report();
        assert_eq!(
            emit_table(&report, TableFormat::Csv),
            emit_table(&report, TableFormat::Csv)
        );
        assert_eq!(
            emit_table(&report, TableFormat::Text),
            emit_table(&report, TableFormat::Text)
        );
    }

    #[test]
    fn csv_round_trips_through_generic_reader() {
        let report = canned_report();
        let table = emit_table(&report, TableFormat::Csv);
        let data: String = table
            .lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let mut reader = csv::Reader::from_reader(data.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .unwrap()
            .iter()
            .map(String::from)
            .collect();
        assert_eq!(headers.join(","), CSV_HEADER);
        let record = reader.records().next().unwrap().unwrap();
        assert_eq!(&record[0], "none");
        assert_eq!(record[9].parse::<f64>().unwrap(), 1.25);
    }

    #[test]
    fn par_indexed_preserves_order() {
        let out = par_indexed(17, 4, |i| i * i);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn reps_below_three_rejected() {
        let model = Model::init(
            ModelConfig {
                seq_len: 4,
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                num_classes: 2,
                out_channels: 1,
            },
            0,
            false,
        )
        .unwrap();
        let base = SamplerConfig {
            steps: 4,
            ..Default::default()
        };
        assert!(matches!(
            run_sweep(&model, &base, &[1], 1).unwrap_err(),
            Error::Usage(_)
        ));
    }
}
