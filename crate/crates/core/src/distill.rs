//! Consistency distillation of a one-step student from a multistep teacher.
//!
//! Each iteration picks adjacent ladder levels `σ_n > σ_{n+1}`, noises an
//! anchor to `σ_n`, moves it to `σ_{n+1}` with one teacher Heun step, and
//! pulls the online student at `(x_{σ_n}, σ_n)` toward the EMA target at
//! `(x_{σ_{n+1}}, σ_{n+1})`. The anchor is the initial SR image for
//! [`InitMode::FromInitSr`] and the clean sample for [`InitMode::FromNoise`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::denoiser::{pseudo_huber, ConditioningFeatures, Denoiser, LossKind, Params, Trainable};
use crate::denoiser::Adam;
use crate::error::{param_err, shape_err, Error, Result};
use crate::rng::RngStream;
use crate::schedules::{EdmSchedule, EDM_RHO, EDM_SIGMA_MAX, EDM_SIGMA_MIN};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitMode {
    FromInitSr,
    FromNoise,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::FromInitSr => "init-sr",
            InitMode::FromNoise => "noise",
        })
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "init-sr" | "from_init_sr" => Ok(InitMode::FromInitSr),
            "noise" | "from_noise" => Ok(InitMode::FromNoise),
            other => Err(Error::Config(format!("unknown init mode {other:?} (init-sr, noise)"))),
        }
    }
}

/// One training item. Point clouds are `[m, d]` blocks whose rows get
/// independent noise levels; any other shape is a single item.
#[derive(Debug, Clone)]
pub struct DistillSample {
    pub x0: Tensor,
    pub init: Tensor,
    pub cond: Option<ConditioningFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Strictly decreasing positive noise levels.
    pub ladder: Vec<f64>,
    pub n_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub loss: LossKind,
    pub huber_c: f64,
    pub init_mode: InitMode,
    pub seed: u64,
}

impl DistillConfig {
    /// Ladder used for `mode`: the skip regime `[min(σ_min, σ_max/15), σ_max]`
    /// when starting from the initial SR image, the full `[0.002, 80]` range
    /// otherwise.
    pub fn ladder_for(mode: InitMode, levels: usize, sigma_max: f64, sigma_min: f64) -> Result<Vec<f64>> {
        let sched = match mode {
            InitMode::FromInitSr => EdmSchedule::skip_start(levels, sigma_max, sigma_min, EDM_RHO)?,
            InitMode::FromNoise => EdmSchedule::new(levels, EDM_SIGMA_MAX, EDM_SIGMA_MIN, EDM_RHO)?,
        };
        let mut s = sched.sigmas().to_vec();
        s.pop();
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.9..=0.99999).contains(&self.ema_decay) {
            return param_err(format!("ema_decay {} outside [0.9, 0.99999]", self.ema_decay));
        }
        if self.ladder.len() < 2 {
            return param_err("distillation ladder needs at least two levels");
        }
        if self.ladder.iter().any(|&s| !(s > 0.0)) || self.ladder.windows(2).any(|w| !(w[0] > w[1])) {
            return param_err("distillation ladder must be positive and strictly decreasing");
        }
        if self.batch_size == 0 {
            return param_err("batch size must be positive");
        }
        if self.loss == LossKind::PseudoHuber && !(self.huber_c > 0.0) {
            return param_err("pseudo-Huber constant must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct DistillReport {
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    /// `‖Δθ‖` of each optimiser step.
    pub update_norms: Vec<f64>,
    /// `‖θ_ema − θ‖` after each iteration.
    pub ema_gaps: Vec<f64>,
    pub teacher_calls: usize,
}

impl DistillReport {
    /// Largest violation of `‖e_k‖ ≤ Σ_j d^{k−j+1}‖u_j‖` (≤ 0 means the bound holds).
    pub fn ema_bound_excess(&self, decay: f64) -> f64 {
        let mut bound = 0.0;
        let mut worst = f64::NEG_INFINITY;
        for (u, e) in self.update_norms.iter().zip(&self.ema_gaps) {
            bound = decay * (bound + u);
            worst = worst.max(e - bound);
        }
        worst
    }
}

fn rows_of(x: &Tensor) -> usize {
    if x.dims().len() == 2 {
        x.dims()[0]
    } else {
        1
    }
}

/// Per-row σ applied to a tensor: `x + σ_r·ε`.
fn add_row_noise(x: &Tensor, sigmas: &[f64], eps: &Tensor) -> Result<Tensor> {
    let row = x.len() / sigmas.len();
    let mut out = x.clone();
    for (i, (v, e)) in out.data_mut().iter_mut().zip(eps.data()).enumerate() {
        *v += (sigmas[i / row] as f32) * e;
    }
    Ok(out)
}

/// One Heun step of the probability-flow ODE per row, from `hi` to `lo`.
pub fn heun_step_rows(
    teacher: &dyn Denoiser,
    x: &Tensor,
    hi: &[f64],
    lo: &[f64],
    cond: Option<&ConditioningFeatures>,
) -> Result<Tensor> {
    let row = x.len() / hi.len();
    let d1 = teacher.denoise_rows(x, hi, cond)?;
    let mut slope1 = vec![0f32; x.len()];
    let mut euler = x.clone();
    for i in 0..x.len() {
        let r = i / row;
        slope1[i] = ((x.data()[i] - d1.data()[i]) as f64 / hi[r]) as f32;
        euler.data_mut()[i] += ((lo[r] - hi[r]) as f32) * slope1[i];
    }
    let d2 = teacher.denoise_rows(&euler, lo, cond)?;
    let mut out = x.clone();
    for i in 0..x.len() {
        let r = i / row;
        let slope2 = ((euler.data()[i] - d2.data()[i]) as f64 / lo[r]) as f32;
        out.data_mut()[i] += (0.5 * (lo[r] - hi[r])) as f32 * (slope1[i] + slope2);
    }
    Ok(out)
}

/// Mean over rows of the per-row distance, with its gradient w.r.t. `a`.
fn row_loss(kind: LossKind, a: &Tensor, b: &Tensor, rows: usize, c: f64) -> Result<(f64, Tensor)> {
    let n = a.len() / rows;
    let mut total = 0.0;
    let mut grad = vec![0f32; a.len()];
    for r in 0..rows {
        let ar = Tensor::new(vec![n], a.data()[r * n..(r + 1) * n].to_vec())?;
        let br = Tensor::new(vec![n], b.data()[r * n..(r + 1) * n].to_vec())?;
        let (v, g) = match kind {
            LossKind::PseudoHuber => pseudo_huber(&ar, &br, c)?,
            LossKind::L2 => {
                let v = ar.sub(&br)?.sq_norm() / n as f64;
                (v, ar.zip_map(&br, |x, y| 2.0 * (x - y) / n as f32)?)
            }
        };
        total += v;
        for (dst, gv) in grad[r * n..(r + 1) * n].iter_mut().zip(g.data()) {
            *dst = gv / rows as f32;
        }
    }
    Ok((total / rows as f64, Tensor::new(a.dims().to_vec(), grad)?))
}

/// Trains `student` in place by consistency distillation from `teacher`.
/// Per-item gradients are computed in parallel and reduced in item order.
pub fn consistency_distill<S: Trainable>(
    teacher: &dyn Denoiser,
    student: &mut S,
    data: &[DistillSample],
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if data.is_empty() {
        return param_err("distillation set is empty");
    }
    for s in data {
        if s.x0.dims() != s.init.dims() {
            return shape_err(format!("x0 {:?} and init {:?} differ", s.x0.dims(), s.init.dims()));
        }
    }
    let mut target = student.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut report = DistillReport::default();
    let root = RngStream::new(cfg.seed, 0xd157);
    let levels = cfg.ladder.len();
    for iter in 0..cfg.n_iters {
        let iter_rng = root.split(iter as u64);
        let online: &S = student;
        let tgt = &target;
        let results: Vec<Result<(f64, Params, usize)>> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|b| {
                let mut rng = iter_rng.split(b as u64);
                let item = &data[rng.index(data.len())];
                let rows = rows_of(&item.x0);
                let idx: Vec<usize> = (0..rows).map(|_| rng.index(levels - 1)).collect();
                let hi: Vec<f64> = idx.iter().map(|&n| cfg.ladder[n]).collect();
                let lo: Vec<f64> = idx.iter().map(|&n| cfg.ladder[n + 1]).collect();
                let anchor = match cfg.init_mode {
                    InitMode::FromInitSr => &item.init,
                    InitMode::FromNoise => &item.x0,
                };
                let eps = rng.gaussian(anchor.dims())?;
                let x_hi = add_row_noise(anchor, &hi, &eps)?;
                let x_lo = heun_step_rows(teacher, &x_hi, &hi, &lo, item.cond.as_ref())?;
                let goal = tgt.denoise_rows(&x_lo, &lo, item.cond.as_ref())?;
                let (v, g) = online.value_and_grad(&x_hi, &hi, item.cond.as_ref(), &mut |d| {
                    row_loss(cfg.loss, d, &goal, rows, cfg.huber_c)
                })?;
                Ok((v, g, 2))
            })
            .collect();
        let mut total = student.params().zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (v, g, calls) = r?;
            loss += v;
            report.teacher_calls += calls;
            total.add_scaled(&g, 1.0)?;
        }
        total.scale(1.0 / cfg.batch_size as f32);
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::NonFinite(format!("distillation loss {loss} at iteration {iter}")));
        }
        let u = opt.step(student.params_mut(), &total)?;
        target.params_mut().ema_toward(student.params(), cfg.ema_decay)?;
        report.losses.push(loss);
        report.update_norms.push(u);
        report.ema_gaps.push(target.params().distance(student.params())?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianPriorOracle, MlpDenoiser};

    fn cfg(iters: usize) -> DistillConfig {
        DistillConfig {
            ladder: DistillConfig::ladder_for(InitMode::FromInitSr, 10, 1.0, 0.002).unwrap(),
            n_iters: iters,
            batch_size: 4,
            lr: 1e-3,
            ema_decay: 0.95,
            loss: LossKind::PseudoHuber,
            huber_c: 0.03,
            init_mode: InitMode::FromInitSr,
            seed: 1,
        }
    }

    fn data() -> Vec<DistillSample> {
        let mut rng = RngStream::new(3, 0);
        (0..4)
            .map(|_| {
                let x0 = rng.gaussian(&[16, 1]).unwrap();
                DistillSample { init: x0.clone(), x0, cond: None }
            })
            .collect()
    }

    #[test]
    fn zero_iterations_leave_student_unchanged() {
        let teacher = GaussianPriorOracle::standard(1);
        let mut student = MlpDenoiser::new(1, 8, 0.5, 2);
        let before = student.clone();
        let report = consistency_distill(&teacher, &mut student, &data(), &cfg(0)).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(student, before);
    }

    #[test]
    fn ema_gap_respects_decay_bound() {
        let teacher = GaussianPriorOracle::standard(1);
        let mut student = MlpDenoiser::new(1, 8, 0.5, 2);
        let c = cfg(50);
        let report = consistency_distill(&teacher, &mut student, &data(), &c).unwrap();
        assert!(report.ema_bound_excess(c.ema_decay) <= 1e-6);
        assert_eq!(report.teacher_calls, 2 * 4 * 50);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(1);
        c.ema_decay = 0.5;
        assert!(c.validate().is_err());
        let mut c = cfg(1);
        c.ladder = vec![0.1, 0.2];
        assert!(c.validate().is_err());
        assert_eq!("init-sr".parse::<InitMode>().unwrap(), InitMode::FromInitSr);
    }

    #[test]
    fn heun_step_matches_gaussian_flow() {
        // Exact flow for N(0,1): x(σ) ∝ √(1+σ²).
        let oracle = GaussianPriorOracle::standard(1);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let out = heun_step_rows(&oracle, &x, &[0.5], &[0.49], None).unwrap();
        let want = (1.0f64 + 0.49 * 0.49).sqrt() / (1.0f64 + 0.25).sqrt();
        assert!((out.data()[0] as f64 - want).abs() < 1e-5);
    }
}
