//! Noise schedules: discrete DDPM β/α/ᾱ with skip-noising, and the
//! ρ-spaced EDM σ ladder.

use crate::error::{param_err, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// DDPM schedule. Index `t` runs `1..=T`; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`.
    alpha_bars: Vec<f64>,
}

impl DdpmSchedule {
    /// Linear β from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return param_err("T must be >= 1");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return param_err(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return param_err("schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return param_err(format!("every beta must lie in (0, 1), got {b}"));
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    /// Like [`from_betas`](Self::from_betas) but admits β = 0, for no-noise
    /// limit tests. The ᾱ invariants do not hold for such schedules.
    #[doc(hidden)]
    pub fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `ᾱ_1..ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// Equivalent variance-exploding noise level `√((1−ᾱ_t)/ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ((1.0 - ab) / ab).sqrt()
    }

    fn check_step(&self, tau: usize) -> Result<()> {
        if tau > self.steps() {
            return param_err(format!("tau {tau} outside 0..={}", self.steps()));
        }
        Ok(())
    }
}

pub fn make_ddpm(steps: usize, beta_start: f64, beta_end: f64) -> Result<DdpmSchedule> {
    DdpmSchedule::linear(steps, beta_start, beta_end)
}

/// `√ᾱ_τ·x0p + √(1−ᾱ_τ)·ε` with a caller-supplied `ε`.
pub fn ddpm_skip_noise_with(x0p: &Tensor, tau: usize, sched: &DdpmSchedule, eps: &Tensor) -> Result<Tensor> {
    sched.check_step(tau)?;
    if tau == 0 {
        return Ok(x0p.clone());
    }
    let ab = sched.alpha_bar(tau);
    x0p.lincomb(ab.sqrt() as f32, eps, (1.0 - ab).sqrt() as f32)
}

/// Noises an initial reconstruction to DDPM step `tau` with fresh `ε ~ N(0, I)`.
/// `tau == 0` returns the input unchanged.
pub fn ddpm_skip_noise(x0p: &Tensor, tau: usize, sched: &DdpmSchedule, rng: &mut RngStream) -> Result<Tensor> {
    sched.check_step(tau)?;
    if tau == 0 {
        return Ok(x0p.clone());
    }
    let eps = rng.gaussian(x0p.dims())?;
    ddpm_skip_noise_with(x0p, tau, sched, &eps)
}

/// EDM σ ladder: `σ_0 = sigma_max > … > σ_{n−1} = sigma_min`, then `σ_n = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdmSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    sigmas: Vec<f64>,
}

pub const EDM_SIGMA_MIN: f64 = 0.002;
pub const EDM_SIGMA_MAX: f64 = 80.0;
pub const EDM_RHO: f64 = 7.0;

impl EdmSchedule {
    pub fn new(n_steps: usize, sigma_max: f64, sigma_min: f64, rho: f64) -> Result<Self> {
        if n_steps == 0 {
            return param_err("n_steps must be >= 1");
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return param_err(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            ));
        }
        if !(rho >= 1.0) {
            return param_err(format!("rho must be >= 1, got {rho}"));
        }
        let mut sigmas = Vec::with_capacity(n_steps + 1);
        if n_steps == 1 {
            sigmas.push(sigma_max);
        } else {
            let (hi, lo) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
            for i in 0..n_steps {
                let f = i as f64 / (n_steps - 1) as f64;
                sigmas.push((hi + f * (lo - hi)).powf(rho));
            }
            // pin endpoints exactly
            sigmas[0] = sigma_max;
            sigmas[n_steps - 1] = sigma_min;
        }
        sigmas.push(0.0);
        Ok(Self {
            sigma_max,
            sigma_min,
            rho,
            sigmas,
        })
    }

    /// Explicit ladder; must be strictly decreasing, positive, and end in 0.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 || *sigmas.last().unwrap() != 0.0 {
            return param_err("sigma ladder must have >= 2 entries and end in 0");
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
            return param_err("sigma ladder must be strictly decreasing");
        }
        let n = sigmas.len() - 1;
        Ok(Self {
            sigma_max: sigmas[0],
            sigma_min: sigmas[n - 1],
            rho: 1.0,
            sigmas,
        })
    }

    /// Ladder for a skip-started run at `sigma_max`, with the floor lowered
    /// to `min(sigma_min, sigma_max / 15)` so small starts keep distinct levels.
    pub fn skip_start(n_steps: usize, sigma_max: f64, sigma_min: f64, rho: f64) -> Result<Self> {
        Self::new(n_steps, sigma_max, sigma_min.min(sigma_max / 15.0), rho)
    }

    /// Sampler step count τ.
    pub fn n_steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// `σ_0..σ_n` including the trailing zero.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `key = value` lines describing this ladder.
    pub fn to_config_lines(&self, prefix: &str) -> String {
        let list = self
            .sigmas
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{prefix}.n_steps = {}\n{prefix}.sigma_max = {:?}\n{prefix}.sigma_min = {:?}\n{prefix}.rho = {:?}\n{prefix}.sigmas = {list}\n",
            self.n_steps(),
            self.sigma_max,
            self.sigma_min,
            self.rho
        )
    }
}

pub fn make_edm(n_steps: usize, sigma_max: f64, sigma_min: f64, rho: f64) -> Result<EdmSchedule> {
    EdmSchedule::new(n_steps, sigma_max, sigma_min, rho)
}

/// Variance-exploding skip-noising `x0p + σ·ε`.
pub fn edm_skip_noise(x0p: &Tensor, sigma_start: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(sigma_start >= 0.0) {
        return param_err(format!("sigma_start must be >= 0, got {sigma_start}"));
    }
    if sigma_start == 0.0 {
        return Ok(x0p.clone());
    }
    let eps = rng.gaussian(x0p.dims())?;
    x0p.lincomb(1.0, &eps, sigma_start as f32)
}
