//! Reverse-process engines: DDPM ancestral sampling from an intermediate step,
//! the EDM Heun sampler, consistency-model multistep sampling, and the full
//! skip-started burst SR pipeline.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::baseline::{estimate_shifts, fuse_and_upsample};
use crate::burst::BurstStack;
use crate::denoiser::{encode_burst, ConditioningFeatures, Denoiser};
use crate::error::{param_err, Error, Result};
use crate::rng::RngStream;
use crate::schedules::{ddpm_skip_noise, edm_skip_noise, DdpmSchedule, EdmSchedule, EDM_RHO, EDM_SIGMA_MIN};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// σ for EDM/CM steps, the DDPM timestep `t` otherwise.
    pub sigma: f64,
    /// Checksum of the state entering the step.
    pub checksum: f64,
    /// Denoiser evaluations made in this step.
    pub calls: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerTrace {
    pub steps: Vec<StepRecord>,
}

impl SamplerTrace {
    pub fn total_calls(&self) -> usize {
        self.steps.iter().map(|s| s.calls).sum()
    }

    pub fn total_ms(&self) -> f64 {
        self.steps.iter().map(|s| s.ms).sum()
    }

    /// `step,sigma,calls,ms` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,sigma,calls,ms\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:?},{},{:.4}\n", s.step, s.sigma, s.calls, s.ms));
        }
        out
    }

    fn record(&mut self, step: usize, sigma: f64, state: &Tensor, calls: usize, started: Instant) {
        self.steps.push(StepRecord {
            step,
            sigma,
            checksum: state.checksum(),
            calls,
            ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
}

fn check_finite(x: &Tensor, what: &str, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} diverged at step {step}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpmOptions {
    /// Add the posterior noise between steps. Disabling it is a test hook.
    pub inject_noise: bool,
}

impl Default for DdpmOptions {
    fn default() -> Self {
        Self { inject_noise: true }
    }
}

/// Ancestral DDPM from step `tau` down to 1.
///
/// The VE denoiser is evaluated at `x_t/√ᾱ_t` with `σ_t = √((1−ᾱ_t)/ᾱ_t)`,
/// which gives `x̂₀` and implicitly `ε̂ = (x_t − √ᾱ_t·x̂₀)/√(1−ᾱ_t)`. The
/// update is the posterior mean of `q(x_{t−1} | x_t, x̂₀)` plus `√β̃_t·z`.
pub fn ddpm_reverse(
    x_tau: &Tensor,
    tau: usize,
    sched: &DdpmSchedule,
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningFeatures>,
    rng: &mut RngStream,
    opts: DdpmOptions,
) -> Result<(Tensor, SamplerTrace)> {
    if tau == 0 || tau > sched.steps() {
        return param_err(format!("tau {tau} outside 1..={}", sched.steps()));
    }
    let mut trace = SamplerTrace::default();
    let mut x = x_tau.clone();
    for t in (1..=tau).rev() {
        let started = Instant::now();
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let beta = sched.beta(t);
        let one_minus = 1.0 - ab;
        let y = x.scale((1.0 / ab.sqrt()) as f32);
        let x0 = denoiser.denoise(&y, sched.sigma(t), cond)?;
        let entering = x.clone();
        if one_minus > 0.0 {
            let c0 = ab_prev.sqrt() * beta / one_minus;
            let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / one_minus;
            x = x0.lincomb(c0 as f32, &x, ct as f32)?;
            if t > 1 && opts.inject_noise {
                let var = (1.0 - ab_prev) / one_minus * beta;
                if var > 0.0 {
                    let z = rng.gaussian(x.dims())?;
                    x = x.lincomb(1.0, &z, var.sqrt() as f32)?;
                }
            }
        }
        check_finite(&x, "ddpm sampler", t)?;
        trace.record(tau - t, t as f64, &entering, 1, started);
    }
    Ok((x, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeunOptions {
    /// EDM `S_churn`; 0 gives the deterministic probability-flow sampler.
    pub churn: f64,
    /// Skip the second-order correction.
    pub euler_only: bool,
}

impl Default for HeunOptions {
    fn default() -> Self {
        Self { churn: 0.0, euler_only: false }
    }
}

/// EDM second-order sampler along `dx/dσ = (x − D(x; σ))/σ`. The final step
/// to σ = 0 is first order, so a Heun run costs `2n − 1` evaluations.
pub fn edm_heun_sample(
    x_init: &Tensor,
    sched: &EdmSchedule,
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningFeatures>,
    rng: &mut RngStream,
    opts: HeunOptions,
) -> Result<(Tensor, SamplerTrace)> {
    if !(opts.churn >= 0.0) {
        return param_err(format!("churn must be >= 0, got {}", opts.churn));
    }
    let sig = sched.sigmas();
    let n = sched.n_steps();
    let gamma = (opts.churn / n as f64).min(2f64.sqrt() - 1.0);
    let mut trace = SamplerTrace::default();
    let mut x = x_init.clone();
    for i in 0..n {
        let started = Instant::now();
        let entering = x.clone();
        let (s_cur, s_next) = (sig[i], sig[i + 1]);
        let s_hat = s_cur * (1.0 + gamma);
        let x_hat = if gamma > 0.0 {
            let eps = rng.gaussian(x.dims())?;
            x.lincomb(1.0, &eps, (s_hat * s_hat - s_cur * s_cur).sqrt() as f32)?
        } else {
            x.clone()
        };
        let d_hat = denoiser.denoise(&x_hat, s_hat, cond)?;
        let mut calls = 1;
        if s_next == 0.0 {
            // x̂ + (0 − σ̂)(x̂ − D)/σ̂ = D
            x = d_hat;
        } else {
            let h = s_next - s_hat;
            let slope = x_hat.sub(&d_hat)?.scale((1.0 / s_hat) as f32);
            let euler = x_hat.lincomb(1.0, &slope, h as f32)?;
            x = if opts.euler_only {
                euler
            } else {
                let d_next = denoiser.denoise(&euler, s_next, cond)?;
                calls += 1;
                let slope2 = euler.sub(&d_next)?.scale((1.0 / s_next) as f32);
                x_hat.lincomb(1.0, &slope.add(&slope2)?, (0.5 * h) as f32)?
            };
        }
        check_finite(&x, "heun sampler", i)?;
        trace.record(i, s_cur, &entering, calls, started);
    }
    Ok((x, trace))
}

/// Consistency sampling: `x ← x0p + σ₁ε`, then alternately map with the
/// student and re-noise to the next level. Returns the last estimate.
pub fn cm_sample(
    x0p: &Tensor,
    student: &dyn Denoiser,
    sigma_seq: &[f64],
    cond: Option<&ConditioningFeatures>,
    rng: &mut RngStream,
) -> Result<(Tensor, SamplerTrace)> {
    if sigma_seq.is_empty() {
        return param_err("consistency sampling needs at least one sigma");
    }
    if sigma_seq.iter().any(|&s| !(s > 0.0)) || sigma_seq.windows(2).any(|w| !(w[0] > w[1])) {
        return param_err(format!("sigma sequence must be positive and strictly decreasing: {sigma_seq:?}"));
    }
    let mut trace = SamplerTrace::default();
    let mut x = edm_skip_noise(x0p, sigma_seq[0], rng)?;
    let mut estimate = x.clone();
    for (k, &sigma) in sigma_seq.iter().enumerate() {
        let started = Instant::now();
        let entering = x.clone();
        estimate = student.denoise(&x, sigma, cond)?;
        check_finite(&estimate, "consistency sampler", k)?;
        if let Some(&next) = sigma_seq.get(k + 1) {
            x = edm_skip_noise(&estimate, next, rng)?;
        }
        trace.record(k, sigma, &entering, 1, started);
    }
    Ok((estimate, trace))
}

/// Default consistency ladder: `t_cm` levels ρ-spaced from `sigma_max` down
/// to `sigma_max / 3^(t_cm − 1)`.
pub fn cm_sigma_seq(t_cm: usize, sigma_max: f64) -> Result<Vec<f64>> {
    if t_cm == 0 {
        return param_err("t_cm must be >= 1");
    }
    if !(sigma_max > 0.0) {
        return param_err(format!("sigma_max must be > 0, got {sigma_max}"));
    }
    if t_cm == 1 {
        return Ok(vec![sigma_max]);
    }
    let stop = sigma_max / 3f64.powi(t_cm as i32 - 1);
    let mut s = EdmSchedule::new(t_cm, sigma_max, stop, EDM_RHO)?.sigmas().to_vec();
    s.pop();
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Ddpm,
    Edm,
    Cm,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Edm => "edm",
            SamplerKind::Cm => "cm",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "edm" => Ok(SamplerKind::Edm),
            "cm" => Ok(SamplerKind::Cm),
            other => Err(Error::Config(format!("unknown sampler {other:?} (ddpm, edm, cm)"))),
        }
    }
}

/// Sampler settings for [`e_bsrd_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub sampler: SamplerKind,
    pub scale_factor: usize,
    /// DDPM start step, or the number of EDM steps.
    pub tau: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub churn: f64,
    pub t_cm: usize,
    /// DDPM schedule length and β range.
    pub ddpm_steps: usize,
    pub ddpm_beta: (f64, f64),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Edm,
            scale_factor: 4,
            tau: 40,
            sigma_max: 0.03,
            sigma_min: EDM_SIGMA_MIN,
            rho: EDM_RHO,
            churn: 0.0,
            t_cm: 1,
            ddpm_steps: 1000,
            ddpm_beta: (1e-4, 0.02),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub image: Tensor,
    /// Deterministic burst SR used as the starting point.
    pub init: Tensor,
    pub trace: SamplerTrace,
    /// Time spent on alignment, fusion and encoding.
    pub init_ms: f64,
}

/// Align → fuse and upsample → encode the burst → skip-noise the initial SR
/// image → reverse process → clamp to `[0, 1]`.
///
/// The skip noise uses `rng.split(0)` and the sampler `rng.split(1)`.
pub fn e_bsrd_pipeline(
    stack: &BurstStack,
    cfg: &PipelineConfig,
    denoiser: &dyn Denoiser,
    rng: &RngStream,
) -> Result<PipelineOutput> {
    let started = Instant::now();
    let align = estimate_shifts(stack)?;
    let init = fuse_and_upsample(stack, &align, cfg.scale_factor)?;
    let cond = encode_burst(stack, &align, cfg.scale_factor)?;
    let init_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut skip_rng = rng.split(0);
    let mut sample_rng = rng.split(1);
    let (image, trace) = match cfg.sampler {
        SamplerKind::Ddpm => {
            if cfg.tau == 0 {
                (init.clone(), SamplerTrace::default())
            } else {
                let sched = DdpmSchedule::linear(cfg.ddpm_steps, cfg.ddpm_beta.0, cfg.ddpm_beta.1)?;
                let x = ddpm_skip_noise(&init, cfg.tau, &sched, &mut skip_rng)?;
                ddpm_reverse(&x, cfg.tau, &sched, denoiser, Some(&cond), &mut sample_rng, DdpmOptions::default())?
            }
        }
        SamplerKind::Edm => {
            if cfg.sigma_max == 0.0 {
                (init.clone(), SamplerTrace::default())
            } else {
                let sched = EdmSchedule::skip_start(cfg.tau, cfg.sigma_max, cfg.sigma_min, cfg.rho)?;
                let x = edm_skip_noise(&init, cfg.sigma_max, &mut skip_rng)?;
                let opts = HeunOptions { churn: cfg.churn, euler_only: false };
                edm_heun_sample(&x, &sched, denoiser, Some(&cond), &mut sample_rng, opts)?
            }
        }
        SamplerKind::Cm => {
            if cfg.sigma_max == 0.0 {
                (init.clone(), SamplerTrace::default())
            } else {
                let seq = cm_sigma_seq(cfg.t_cm, cfg.sigma_max)?;
                cm_sample(&init, denoiser, &seq, Some(&cond), &mut skip_rng)?
            }
        }
    };
    Ok(PipelineOutput { image: image.clamp(0.0, 1.0), init, trace, init_ms })
}
