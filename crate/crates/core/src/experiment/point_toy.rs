//! Two-dimensional Gaussian-mixture toy. The analytic posterior mean plays the
//! teacher, small MLPs play the students and W₂ stands in for FID.

use crate::denoiser::{Denoiser, GmmOracle, MlpDenoiser, SIGMA_DATA};
use crate::distill::{consistency_distill, DistillConfig, DistillReport, DistillSample, InitMode};
use crate::denoiser::LossKind;
use crate::error::{param_err, Result};
use crate::metrics::{bootstrap_mean_ci, wasserstein2_2d, BootstrapCi};
use crate::rng::RngStream;
use crate::samplers::{cm_sample, edm_heun_sample, HeunOptions};
use crate::schedules::{EdmSchedule, EDM_RHO, EDM_SIGMA_MAX, EDM_SIGMA_MIN};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PointToy {
    pub gmm: GmmOracle,
    /// Std of the perturbation turning a clean point into its "initial SR".
    pub init_noise: f64,
    /// Skip-start level used by the teacher and the init-anchored student.
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Teacher Heun steps.
    pub teacher_steps: usize,
}

impl PointToy {
    /// Two well separated, unequal components.
    pub fn standard() -> Self {
        let gmm = GmmOracle::new(vec![0.3, 0.7], vec![vec![-1.0, 0.5], vec![1.0, -0.5]], vec![0.04, 0.09])
            .expect("valid mixture");
        Self { gmm, init_noise: 0.1, sigma_max: 0.3, sigma_min: 0.002, teacher_steps: 40 }
    }

    /// `n` clean points and their perturbed initial estimates, both `[n, 2]`.
    pub fn data(&self, n: usize, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
        let x0 = self.gmm.sample(n, rng)?;
        let eps = rng.gaussian(x0.dims())?;
        let init = x0.lincomb(1.0, &eps, self.init_noise as f32)?;
        Ok((x0, init))
    }

    pub fn distill_data(&self, blocks: usize, block: usize, seed: u64) -> Result<Vec<DistillSample>> {
        let root = RngStream::new(seed, 0x9017);
        (0..blocks)
            .map(|b| {
                let (x0, init) = self.data(block, &mut root.split(b as u64))?;
                Ok(DistillSample { x0, init, cond: None })
            })
            .collect()
    }

    pub fn teacher_schedule(&self) -> Result<EdmSchedule> {
        EdmSchedule::skip_start(self.teacher_steps, self.sigma_max, self.sigma_min, EDM_RHO)
    }

    /// Teacher output from `init + σ_max ε`.
    pub fn teacher_samples(&self, init: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        let sched = self.teacher_schedule()?;
        let x = init.lincomb(1.0, &rng.gaussian(init.dims())?, self.sigma_max as f32)?;
        Ok(edm_heun_sample(&x, &sched, &self.gmm, None, rng, HeunOptions::default())?.0)
    }

    /// One-step (or `sigma_seq`-step) student output. The init-anchored student
    /// starts from `init + σ_max ε`; the noise-anchored one from `80 ε`.
    pub fn student_samples(
        &self,
        student: &dyn Denoiser,
        mode: InitMode,
        init: &Tensor,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        match mode {
            InitMode::FromInitSr => Ok(cm_sample(init, student, &[self.sigma_max], None, rng)?.0),
            InitMode::FromNoise => {
                let zero = Tensor::zeros(init.dims())?;
                Ok(cm_sample(&zero, student, &[EDM_SIGMA_MAX], None, rng)?.0)
            }
        }
    }
}

pub fn points(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks_exact(2).map(|p| [p[0] as f64, p[1] as f64]).collect()
}

pub fn w2(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(wasserstein2_2d(&points(a), &points(b))?.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub block: usize,
    pub levels: usize,
    pub n_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub eval_batches: usize,
    pub eval_points: usize,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 64,
            block: 64,
            levels: 18,
            n_iters: 1500,
            batch_size: 4,
            lr: 2e-3,
            ema_decay: 0.95,
            eval_batches: 20,
            eval_points: 256,
            resamples: 2000,
            seed: 0,
        }
    }
}

/// Distils an MLP student anchored according to `mode`.
pub fn distill_point_student(
    toy: &PointToy,
    mode: InitMode,
    cfg: &AblationConfig,
) -> Result<(MlpDenoiser, DistillReport)> {
    let data = toy.distill_data(cfg.blocks, cfg.block, cfg.seed)?;
    let ladder = match mode {
        InitMode::FromInitSr => DistillConfig::ladder_for(mode, cfg.levels, toy.sigma_max, toy.sigma_min)?,
        InitMode::FromNoise => DistillConfig::ladder_for(mode, cfg.levels, EDM_SIGMA_MAX, EDM_SIGMA_MIN)?,
    };
    let dc = DistillConfig {
        ladder,
        n_iters: cfg.n_iters,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        ema_decay: cfg.ema_decay,
        loss: LossKind::L2,
        huber_c: 0.03,
        init_mode: mode,
        seed: cfg.seed,
    };
    let mut student = MlpDenoiser::new(2, cfg.hidden, SIGMA_DATA, cfg.seed.wrapping_add(17));
    let report = consistency_distill(&toy.gmm, &mut student, &data, &dc)?;
    Ok((student, report))
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub modes: (InitMode, InitMode),
    /// Per evaluation batch W₂ to the teacher, first arm.
    pub w2_a: Vec<f64>,
    pub w2_b: Vec<f64>,
    /// Bootstrap CI of the mean of `w2_b − w2_a` (paired by batch).
    pub diff: BootstrapCi,
}

impl AblationReport {
    /// True when the first arm is closer to the teacher at the CI level.
    pub fn first_strictly_better(&self) -> bool {
        self.diff.lo > 0.0
    }
}

/// Distils one student per arm with identical budgets and seeds, then
/// compares their samples to teacher samples on shared evaluation batches.
pub fn distill_ablation(toy: &PointToy, modes: (InitMode, InitMode), cfg: &AblationConfig) -> Result<AblationReport> {
    if cfg.eval_batches == 0 {
        return param_err("ablation needs at least one evaluation batch");
    }
    let (sa, _) = distill_point_student(toy, modes.0, cfg)?;
    let (sb, _) = if modes.1 == modes.0 { (sa.clone(), DistillReport::default()) } else { distill_point_student(toy, modes.1, cfg)? };
    let root = RngStream::new(cfg.seed, 0xab1a);
    let mut w2_a = Vec::with_capacity(cfg.eval_batches);
    let mut w2_b = Vec::with_capacity(cfg.eval_batches);
    for k in 0..cfg.eval_batches {
        let batch = root.split(k as u64);
        let (_, init) = toy.data(cfg.eval_points, &mut batch.split(0))?;
        let teacher = toy.teacher_samples(&init, &mut batch.split(1))?;
        let a = toy.student_samples(&sa, modes.0, &init, &mut batch.split(2))?;
        let b = toy.student_samples(&sb, modes.1, &init, &mut batch.split(2))?;
        w2_a.push(w2(&a, &teacher)?);
        w2_b.push(w2(&b, &teacher)?);
    }
    let diffs: Vec<f64> = w2_b.iter().zip(&w2_a).map(|(b, a)| b - a).collect();
    let diff = bootstrap_mean_ci(&diffs, cfg.resamples, 0.95, &mut root.split(u64::MAX))?;
    Ok(AblationReport { modes, w2_a, w2_b, diff })
}

/// W₂ between `n` ground-truth mixture samples and `n` oracle Heun samples
/// started from pure noise at σ = 80, for each step count in `taus`.
pub fn tau_sweep_w2(toy: &PointToy, taus: &[usize], n: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let root = RngStream::new(seed, 0x7a05);
    let truth = toy.gmm.sample(n, &mut root.split(0))?;
    taus.iter()
        .map(|&tau| {
            let sched = EdmSchedule::new(tau, EDM_SIGMA_MAX, EDM_SIGMA_MIN, EDM_RHO)?;
            let mut rng = root.split(1);
            let x = rng.gaussian(&[n, 2])?.scale(EDM_SIGMA_MAX as f32);
            let (out, _) = edm_heun_sample(&x, &sched, &toy.gmm, None, &mut rng, HeunOptions::default())?;
            Ok((tau, w2(&out, &truth)?))
        })
        .collect()
}
