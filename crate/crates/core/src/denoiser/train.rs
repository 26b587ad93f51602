//! Training loop, optimiser, losses and the finite-difference gradient check.

use rayon::prelude::*;

use super::{ConditioningFeatures, Denoiser, Params};
use crate::error::{param_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A denoiser whose parameters can be optimised.
pub trait Trainable: Denoiser + Clone {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;

    /// Evaluates `D`, hands it to `loss` (which returns the value and `dL/dD`)
    /// and returns the value with the parameter gradient.
    fn value_and_grad(
        &self,
        x: &Tensor,
        sigmas: &[f64],
        cond: Option<&ConditioningFeatures>,
        loss: &mut dyn FnMut(&Tensor) -> Result<(f64, Tensor)>,
    ) -> Result<(f64, Params)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L2,
    /// `sqrt(mean(r²) + c²) − c`.
    PseudoHuber,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::PseudoHuber => "pseudo_huber",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "l2" => Ok(LossKind::L2),
            "pseudo_huber" | "pseudo-huber" => Ok(LossKind::PseudoHuber),
            other => Err(Error::Config(format!("unknown loss {other:?} (l2, pseudo_huber)"))),
        }
    }
}

/// EDM loss weight `(σ² + σ_d²) / (σ·σ_d)²`.
pub fn edm_loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Pseudo-Huber distance between `a` and `b` and its gradient w.r.t. `a`.
pub fn pseudo_huber(a: &Tensor, b: &Tensor, c: f64) -> Result<(f64, Tensor)> {
    let mse = a.sub(b)?.sq_norm() / a.len() as f64;
    let root = (mse + c * c).sqrt();
    let k = 1.0 / (a.len() as f64 * root);
    let grad = a.zip_map(b, |x, y| ((x - y) as f64 * k) as f32)?;
    Ok((root - c, grad))
}

/// Mean squared error times `weight`, with its gradient w.r.t. `a`.
pub(crate) fn weighted_mse(a: &Tensor, b: &Tensor, weight: f64) -> Result<(f64, Tensor)> {
    let n = a.len() as f64;
    let value = weight * a.sub(b)?.sq_norm() / n;
    let grad = a.zip_map(b, |x, y| (2.0 * weight * (x - y) as f64 / n) as f32)?;
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Option<Params>,
    v: Option<Params>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: None, v: None, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the update norm `‖Δθ‖`.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<f64> {
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut norm2 = 0.0;
        for i in 0..params.len() {
            let g = grads.slice(i);
            let mi = m.get_mut(i).data_mut();
            let vi = v.get_mut(i).data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g[j] as f64;
                mi[j] = (self.beta1 * mi[j] as f64 + (1.0 - self.beta1) * gj) as f32;
                vi[j] = (self.beta2 * vi[j] as f64 + (1.0 - self.beta2) * gj * gj) as f32;
                let mh = mi[j] as f64 / bc1;
                let vh = vi[j] as f64 / bc2;
                let delta = self.lr * mh / (vh.sqrt() + self.eps);
                p[j] -= delta as f32;
                norm2 += delta * delta;
            }
        }
        Ok(norm2.sqrt())
    }
}

/// Log-normal noise-level distribution truncated to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSampler {
    pub p_mean: f64,
    pub p_std: f64,
    pub min: f64,
    pub max: f64,
}

impl SigmaSampler {
    pub fn new(p_mean: f64, p_std: f64, min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && max >= min && p_std >= 0.0) {
            return param_err(format!("sigma sampler range [{min}, {max}] std {p_std}"));
        }
        Ok(Self { p_mean, p_std, min, max })
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        for _ in 0..1000 {
            let s = (self.p_mean + self.p_std * rng.standard_normal()).exp();
            if s >= self.min && s <= self.max {
                return s;
            }
        }
        (self.p_mean.exp()).clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone)]
pub struct TrainPair {
    pub hr: Tensor,
    pub cond: Option<ConditioningFeatures>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma: SigmaSampler,
    pub sigma_data: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Denoising score matching with the EDM weighting:
/// `λ(σ)·‖D(x₀ + σε; σ, cond) − x₀‖²`, σ from `cfg.sigma`.
///
/// Per-sample gradients are computed in parallel and reduced in sample order,
/// so results do not depend on the thread count.
pub fn train_denoiser<M: Trainable>(model: &mut M, data: &[TrainPair], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return param_err("training set is empty");
    }
    if cfg.batch_size == 0 {
        return param_err("batch size must be positive");
    }
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let root = RngStream::new(cfg.seed, 0x7a41);
    for step in 0..cfg.steps {
        let step_rng = root.split(step as u64);
        let results: Vec<Result<(f64, Params)>> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|b| {
                let mut rng = step_rng.split(b as u64);
                let pair = &data[rng.index(data.len())];
                let sigma = cfg.sigma.sample(&mut rng);
                let noise = rng.gaussian(pair.hr.dims())?;
                let x = pair.hr.lincomb(1.0, &noise, sigma as f32)?;
                let weight = edm_loss_weight(sigma, cfg.sigma_data);
                model.value_and_grad(&x, &[sigma], pair.cond.as_ref(), &mut |d| weighted_mse(d, &pair.hr, weight))
            })
            .collect();
        let mut total = model.params().zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_scaled(&g, 1.0)?;
        }
        let inv = 1.0 / cfg.batch_size as f32;
        total.scale(inv);
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {step}")));
        }
        opt.step(model.params_mut(), &total)?;
        report.losses.push(loss);
    }
    Ok(report)
}

/// Result of a finite-difference check for one layer type.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub layer: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares analytic gradients from `eval` against central differences on
/// `per_layer` random entries drawn from each group of parameter slots.
pub(crate) fn finite_difference_check(
    params: &[Vec<f64>],
    groups: &[(&str, Vec<usize>)],
    per_layer: usize,
    rng: &mut RngStream,
    eval: impl Fn(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
) -> Vec<GradCheck> {
    let (_, analytic) = eval(params);
    let h = 1e-5;
    groups
        .iter()
        .map(|(name, slots)| {
            let total: usize = slots.iter().map(|&s| params[s].len()).sum();
            let mut worst: f64 = 0.0;
            for _ in 0..per_layer {
                let mut flat = rng.index(total);
                let mut slot = slots[0];
                for &s in slots {
                    if flat < params[s].len() {
                        slot = s;
                        break;
                    }
                    flat -= params[s].len();
                }
                let mut p = params.to_vec();
                p[slot][flat] += h;
                let (lp, _) = eval(&p);
                p[slot][flat] -= 2.0 * h;
                let (lm, _) = eval(&p);
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[slot][flat];
                let scale = fd.abs().max(an.abs()).max(1e-8);
                worst = worst.max((fd - an).abs() / scale);
            }
            GradCheck { layer: name.to_string(), checked: per_layer, max_rel_err: worst }
        })
        .collect()
}
