//! Noise schedule and the reverse-process sampling loop.
//!
//! The schedule uses 1000 training steps with betas linear from 1e-4 to
//! 2e-2; sampling runs T substeps evenly strided over the training range,
//! descending to 0. Per-element update arithmetic is done in f64 and
//! rounded once to f32, so scalar oracles agree to well under 1e-6.
//!
//! Classifier-free guidance runs the conditional and unconditional branches
//! in lockstep through the same block schedule; the cache keeps one slot
//! namespace per branch. The deterministic update (eta = 0) makes cached
//! and uncached runs exactly comparable: with interval 1 every step
//! recomputes and the output is bit-identical to the no-cache policy.

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::{
    should_recompute, Branch, CachePoint, CachePolicy, CacheStats, CacheStore, CountingMode,
    Decision,
};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Model};
use crate::tensor::{RandomSource, Tensor};
use crate::trace::{FeatureTrace, TapMode};

/// Training-time diffusion steps for the fixed linear schedule.
pub const TRAIN_STEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

/// Forward-process constants plus the sampling substep mapping.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub train_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Cumulative products of alphas; strictly decreasing, in (0, 1].
    pub alpha_bars: Vec<f64>,
    /// T training-step indices, evenly strided, strictly decreasing to 0.
    pub substep_map: Vec<usize>,
}

/// Build the schedule for `t_steps` sampling steps.
pub fn build_schedule(train_steps: usize, t_steps: usize) -> Result<DiffusionSchedule> {
    if t_steps < 2 || t_steps > train_steps {
        return Err(Error::Config(format!(
            "sampling steps must be in 2..={train_steps}, got {t_steps}"
        )));
    }
    let mut betas = Vec::with_capacity(train_steps);
    let mut alphas = Vec::with_capacity(train_steps);
    let mut alpha_bars = Vec::with_capacity(train_steps);
    let mut prod = 1.0f64;
    for i in 0..train_steps {
        let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (train_steps - 1) as f64;
        let alpha = 1.0 - beta;
        prod *= alpha;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bars.push(prod);
    }
    let substep_map: Vec<usize> = (0..t_steps)
        .map(|i| i * train_steps / t_steps)
        .rev()
        .collect();
    Ok(DiffusionSchedule {
        train_steps,
        betas,
        alphas,
        alpha_bars,
        substep_map,
    })
}

/// Classifier-free guidance combination:
/// `eps_uncond + s * (eps_cond - eps_uncond)`.
///
/// The boundary strengths are special-cased so that s = 0 returns the
/// unconditional prediction exactly and s = 1 the conditional one, which
/// float arithmetic would not guarantee.
pub fn guided_eps(eps_uncond: &Tensor, eps_cond: &Tensor, s: f32) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::DimensionMismatch {
            op: "guided_eps",
            left: eps_uncond.shape().to_vec(),
            right: eps_cond.shape().to_vec(),
        });
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + s * (c - u))
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), data)
}

fn check_abar(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::NumericDomain(format!(
            "{name} must be in (0, 1], got {v}"
        )));
    }
    Ok(())
}

/// Deterministic reverse update (eta = 0):
/// `x0 = (x_t - sqrt(1-abar_t) * eps) / sqrt(abar_t)`,
/// `x_prev = sqrt(abar_prev) * x0 + sqrt(1-abar_prev) * eps`.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, abar_t: f64, abar_prev: f64) -> Result<Tensor> {
    if x_t.shape() != eps.shape() {
        return Err(Error::DimensionMismatch {
            op: "ddim_step",
            left: x_t.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    check_abar("abar_t", abar_t)?;
    check_abar("abar_prev", abar_prev)?;
    let sqrt_abar_t = abar_t.sqrt();
    let sqrt_one_minus_t = (1.0 - abar_t).sqrt();
    let sqrt_abar_prev = abar_prev.sqrt();
    let sqrt_one_minus_prev = (1.0 - abar_prev).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let x0 = (x as f64 - sqrt_one_minus_t * e as f64) / sqrt_abar_t;
            (sqrt_abar_prev * x0 + sqrt_one_minus_prev * e as f64) as f32
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Ancestral reverse update between two substeps.
///
/// The effective per-step alpha is `abar_t / abar_prev`; the posterior mean
/// is `(x_t - beta_eff / sqrt(1-abar_t) * eps) / sqrt(alpha_eff)` and the
/// noise scale is `sqrt(beta_eff * (1-abar_prev) / (1-abar_t))`, which is 0
/// at the terminal step (abar_prev = 1), so the final update adds no noise.
/// When noise is added, one `randn` tensor is consumed from the run's
/// stream immediately after the model forward for that step.
pub fn ddpm_step(
    x_t: &Tensor,
    eps: &Tensor,
    abar_t: f64,
    abar_prev: f64,
    rng: &mut RandomSource,
) -> Result<Tensor> {
    if x_t.shape() != eps.shape() {
        return Err(Error::DimensionMismatch {
            op: "ddpm_step",
            left: x_t.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    check_abar("abar_t", abar_t)?;
    check_abar("abar_prev", abar_prev)?;
    let alpha_eff = abar_t / abar_prev;
    let beta_eff = 1.0 - alpha_eff;
    let sqrt_alpha_eff = alpha_eff.sqrt();
    let eps_coef = beta_eff / (1.0 - abar_t).sqrt();
    let var = beta_eff * (1.0 - abar_prev) / (1.0 - abar_t);
    let sigma = if var > 0.0 { var.sqrt() } else { 0.0 };
    let noise = if sigma > 0.0 {
        Some(rng.randn(x_t.shape())?)
    } else {
        None
    };
    let mut data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| ((x as f64 - eps_coef * e as f64) / sqrt_alpha_eff) as f32)
        .collect();
    if let Some(z) = noise {
        for (v, &n) in data.iter_mut().zip(z.data()) {
            *v = (*v as f64 + sigma * n as f64) as f32;
        }
    }
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Reverse-process family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerKind::Ddim => write!(f, "ddim"),
            SamplerKind::Ddpm => write!(f, "ddpm"),
        }
    }
}

/// Everything one sampling run depends on besides the weights.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub steps: usize,
    pub kind: SamplerKind,
    pub cfg_scale: f32,
    pub seed: u64,
    pub label: u32,
    pub policy: CachePolicy,
    pub cache_point: CachePoint,
    pub counting: CountingMode,
    /// Arm the feature taps with this mode; `None` disables tracing.
    pub tap: Option<TapMode>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            kind: SamplerKind::Ddim,
            cfg_scale: 1.5,
            seed: 0,
            label: 0,
            policy: CachePolicy::Off,
            cache_point: CachePoint::PostGate,
            counting: CountingMode::Batched,
            tap: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.steps < 2 || self.steps > TRAIN_STEPS {
            return Err(Error::Config(format!(
                "sampling steps must be in 2..={TRAIN_STEPS}, got {}",
                self.steps
            )));
        }
        self.policy.validate(self.steps)?;
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return Err(Error::Config(format!(
                "cfg_scale must be finite and >= 0, got {}",
                self.cfg_scale
            )));
        }
        if (self.label as usize) >= model.config.num_classes {
            return Err(Error::Input(format!(
                "label {} out of range (num_classes = {})",
                self.label, model.config.num_classes
            )));
        }
        Ok(())
    }
}

/// Everything a sampling run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub final_latent: Tensor,
    pub stats: CacheStats,
    pub trace: Option<FeatureTrace>,
    /// End-to-end wall time of the run.
    pub wall: Duration,
    /// Cumulative time spent inside model forward passes.
    pub forward: Duration,
}

/// Run the reverse process to completion.
///
/// The initial latent is drawn from the seeded stream, then steps execute
/// in descending substep order. Each step queries the cache policy with the
/// elapsed-step counter, runs the conditional and unconditional branches
/// under that decision, combines them with guidance, and applies the
/// reverse update. Apart from the timing fields, the output is a pure
/// function of the weights and the config.
pub fn sample(model: &Model, cfg: &SamplerConfig) -> Result<RunOutput> {
    cfg.validate(model)?;
    let mcfg = &model.config;
    let schedule = build_schedule(TRAIN_STEPS, cfg.steps)?;
    let wall_start = Instant::now();
    let mut forward = Duration::ZERO;

    let mut rng = RandomSource::new(cfg.seed);
    let mut x = rng.randn(&[mcfg.seq_len, mcfg.out_channels])?;
    let mut store = CacheStore::new(mcfg.depth);
    let mut stats = CacheStats::new();
    let mut trace = match cfg.tap {
        Some(mode) => {
            let feature_len = match mode {
                TapMode::Full => mcfg.seq_len * mcfg.dim,
                TapMode::Pooled => mcfg.dim,
            };
            Some(FeatureTrace::new(
                cfg.steps,
                mcfg.depth,
                mode,
                feature_len,
                cfg.policy.to_string(),
                cfg.cache_point,
            )?)
        }
        None => None,
    };
    let store_enabled = cfg.policy != CachePolicy::Off;

    for (step, &t) in schedule.substep_map.iter().enumerate() {
        let decision = if should_recompute(step, &cfg.policy) {
            Decision::Recompute
        } else {
            Decision::Reuse
        };

        let fwd_start = Instant::now();
        let run_branch = |branch: Branch,
                              label: Option<u32>,
                              count: bool,
                              store: &mut CacheStore,
                              stats: &mut CacheStats,
                              trace: Option<&mut FeatureTrace>|
         -> Result<Tensor> {
            let mut ctx = ForwardCtx {
                store,
                stats,
                decision,
                branch,
                step,
                cache_point: cfg.cache_point,
                count,
                store_enabled,
            };
            model.forward(&x, t, label, &mut ctx, trace)
        };
        let eps_cond = run_branch(
            Branch::Cond,
            Some(cfg.label),
            true,
            &mut store,
            &mut stats,
            trace.as_mut(),
        )?;
        let eps_uncond = run_branch(
            Branch::Uncond,
            None,
            cfg.counting == CountingMode::Split,
            &mut store,
            &mut stats,
            trace.as_mut(),
        )?;
        forward += fwd_start.elapsed();

        stats.record_step(decision);
        let eps = guided_eps(&eps_uncond, &eps_cond, cfg.cfg_scale)?;
        let abar_t = schedule.alpha_bars[t];
        let abar_prev = if step + 1 < cfg.steps {
            schedule.alpha_bars[schedule.substep_map[step + 1]]
        } else {
            1.0
        };
        x = match cfg.kind {
            SamplerKind::Ddim => ddim_step(&x, &eps, abar_t, abar_prev)?,
            SamplerKind::Ddpm => ddpm_step(&x, &eps, abar_t, abar_prev, &mut rng)?,
        };
        store.step_completed();
    }

    Ok(RunOutput {
        final_latent: x,
        stats,
        trace,
        wall: wall_start.elapsed(),
        forward,
    })
}
