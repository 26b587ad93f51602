//! Experiment orchestration on the desk-scale toys: datasets, teacher
//! training, distillation, evaluation, sweeps and runtime benchmarks.

mod config;
pub mod point_toy;

pub use config::{ExperimentConfig, List, Origin};

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::baseline::{estimate_shifts, fuse_and_upsample};
use crate::burst::{generate_dataset, BurstSample, BurstStack};
use crate::denoiser::{
    encode_burst, train_denoiser, Denoiser, SigmaSampler, TinyDenoiser, TrainConfig, TrainPair, TrainReport,
};
use crate::distill::{consistency_distill, DistillConfig, DistillReport, DistillSample};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::rng::RngStream;
use crate::samplers::{e_bsrd_pipeline, PipelineConfig, SamplerKind, SamplerTrace};
use crate::tensor::Tensor;

/// Offset separating the held-out image seeds from the training seeds.
const TEST_SEED_OFFSET: u64 = 0x7e57_0000;

/// Runs `f` on a pool of `jobs` threads (the global pool when `jobs == 0`).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn train_set(cfg: &ExperimentConfig) -> Result<Vec<BurstSample>> {
    generate_dataset(cfg.train_images, cfg.crop, &cfg.degradation())
}

pub fn test_set(cfg: &ExperimentConfig) -> Result<Vec<BurstSample>> {
    let mut params = cfg.degradation();
    params.seed = cfg.seed.wrapping_add(TEST_SEED_OFFSET);
    generate_dataset(cfg.test_images, cfg.crop, &params)
}

/// HR target, deterministic initial SR and burst features for one sample.
pub fn prepare(sample: &BurstSample, scale_factor: usize) -> Result<DistillSample> {
    let align = estimate_shifts(&sample.burst)?;
    let init = fuse_and_upsample(&sample.burst, &align, scale_factor)?;
    let cond = encode_burst(&sample.burst, &align, scale_factor)?;
    Ok(DistillSample { x0: sample.hr.clone(), init, cond: Some(cond) })
}

pub fn prepare_all(samples: &[BurstSample], scale_factor: usize) -> Result<Vec<DistillSample>> {
    samples.par_iter().map(|s| prepare(s, scale_factor)).collect()
}

pub fn new_denoiser(cfg: &ExperimentConfig, seed: u64) -> TinyDenoiser {
    let mut net = TinyDenoiser::new(seed);
    net.sigma_data = cfg.sigma_data;
    net.cond_scale = cfg.cond_scale;
    net
}

/// Trains the conditioned teacher on the training split.
pub fn train_teacher(cfg: &ExperimentConfig, data: &[DistillSample]) -> Result<(TinyDenoiser, TrainReport)> {
    let pairs: Vec<TrainPair> = data.iter().map(|d| TrainPair { hr: d.x0.clone(), cond: d.cond.clone() }).collect();
    let mut net = new_denoiser(cfg, cfg.seed);
    let tc = TrainConfig {
        steps: cfg.train_steps,
        batch_size: cfg.train_batch,
        lr: cfg.train_lr,
        sigma: SigmaSampler::new(cfg.train_p_mean, cfg.train_p_std, cfg.sigma_min, cfg.train_sigma_max)?,
        sigma_data: cfg.sigma_data,
        seed: cfg.seed,
    };
    let report = with_jobs(cfg.jobs, || train_denoiser(&mut net, &pairs, &tc))??;
    Ok((net, report))
}

pub fn distill_config(cfg: &ExperimentConfig) -> Result<DistillConfig> {
    Ok(DistillConfig {
        ladder: DistillConfig::ladder_for(cfg.init_mode, cfg.distill_levels, cfg.sigma_max, cfg.sigma_min)?,
        n_iters: cfg.distill_iters,
        batch_size: cfg.distill_batch,
        lr: cfg.distill_lr,
        ema_decay: cfg.ema_decay,
        loss: cfg.distill_loss,
        huber_c: cfg.huber_c,
        init_mode: cfg.init_mode,
        seed: cfg.seed,
    })
}

/// Distils a consistency student from `teacher`.
pub fn distill_student(
    cfg: &ExperimentConfig,
    teacher: &TinyDenoiser,
    data: &[DistillSample],
) -> Result<(TinyDenoiser, DistillReport)> {
    let mut student = if cfg.warm_start { teacher.clone() } else { new_denoiser(cfg, cfg.seed.wrapping_add(1)) };
    let dc = distill_config(cfg)?;
    let report = with_jobs(cfg.jobs, || consistency_distill(teacher, &mut student, data, &dc))??;
    Ok((student, report))
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &str) -> Result<TinyDenoiser> {
    let p = Path::new(path);
    if !p.join("manifest.txt").exists() {
        return Err(Error::Config(format!("missing checkpoint {}", p.display())));
    }
    let mut net = TinyDenoiser::load(p)?;
    net.sigma_data = cfg.sigma_data;
    net.cond_scale = cfg.cond_scale;
    Ok(net)
}

pub fn load_teacher(cfg: &ExperimentConfig) -> Result<TinyDenoiser> {
    load_checkpoint(cfg, &cfg.teacher_checkpoint)
}

pub fn load_student(cfg: &ExperimentConfig) -> Result<TinyDenoiser> {
    load_checkpoint(cfg, &cfg.student_checkpoint)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub outputs: Vec<Tensor>,
    pub inits: Vec<Tensor>,
    pub traces: Vec<SamplerTrace>,
}

impl EvalOutput {
    pub fn calls_per_image(&self) -> f64 {
        let n = self.traces.len().max(1) as f64;
        self.traces.iter().map(SamplerTrace::total_calls).sum::<usize>() as f64 / n
    }
}

/// Per-image RNG used by every evaluation.
pub fn image_rng(seed: u64, index: usize) -> RngStream {
    RngStream::new(seed, 0xe7a1).split(index as u64)
}

/// Runs the pipeline on every sample (in parallel) and scores it against HR.
pub fn evaluate(
    samples: &[BurstSample],
    pcfg: &PipelineConfig,
    denoiser: &dyn Denoiser,
    seed: u64,
    jobs: usize,
) -> Result<EvalOutput> {
    let runs = with_jobs(jobs, || {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| e_bsrd_pipeline(&s.burst, pcfg, denoiser, &image_rng(seed, i)))
            .collect::<Result<Vec<_>>>()
    })??;
    let targets: Vec<Tensor> = samples.iter().map(|s| s.hr.clone()).collect();
    let outputs: Vec<Tensor> = runs.iter().map(|r| r.image.clone()).collect();
    let report = MetricReport::evaluate(&outputs, &targets)?;
    Ok(EvalOutput {
        report,
        outputs,
        inits: runs.iter().map(|r| r.init.clone()).collect(),
        traces: runs.into_iter().map(|r| r.trace).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SigmaMax,
    Tau,
    TCm,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::SigmaMax => "sigma_max",
            SweepAxis::Tau => "tau",
            SweepAxis::TCm => "t_cm",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma_max" | "sigma-max" => Ok(SweepAxis::SigmaMax),
            "tau" => Ok(SweepAxis::Tau),
            "t_cm" | "t-cm" | "tcm" => Ok(SweepAxis::TCm),
            other => Err(Error::Config(format!("unknown sweep axis {other:?} (sigma_max, tau, t_cm)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    /// Hash of the row's full configuration.
    pub config_hash: String,
    pub eval: EvalOutput,
}

/// Configuration for one sweep value: EDM teacher for `sigma_max`/`tau`,
/// consistency student for `t_cm`.
pub fn sweep_row_config(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::SigmaMax => {
            c.sampler = SamplerKind::Edm;
            c.sigma_max = value;
        }
        SweepAxis::Tau => {
            c.sampler = SamplerKind::Edm;
            c.tau = value as usize;
        }
        SweepAxis::TCm => {
            c.sampler = SamplerKind::Cm;
            c.t_cm = value as usize;
        }
    }
    c
}

pub fn sweep_values(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<f64> {
    match axis {
        SweepAxis::SigmaMax => cfg.sweep_sigma_max.0.clone(),
        SweepAxis::Tau => cfg.sweep_tau.0.iter().map(|&v| v as f64).collect(),
        SweepAxis::TCm => cfg.sweep_t_cm.0.iter().map(|&v| v as f64).collect(),
    }
}

/// One evaluated row per sweep value, in the order given.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    teacher: &dyn Denoiser,
    student: &dyn Denoiser,
    test: &[BurstSample],
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&value| {
            let rc = sweep_row_config(cfg, axis, value);
            let net = if axis == SweepAxis::TCm { student } else { teacher };
            let eval = evaluate(test, &rc.pipeline(), net, rc.seed, rc.jobs)?;
            Ok(SweepRow { axis, value, config_hash: rc.hash(), eval })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("config_hash,axis,value,psnr_mean,psnr_std,ssim_mean,ssim_std,calls_per_image\n");
    for r in rows {
        let p = r.eval.report.psnr_summary();
        let s = r.eval.report.ssim_summary();
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.config_hash,
            r.axis,
            r.value,
            p.mean,
            p.stddev,
            s.mean,
            s.stddev,
            r.eval.calls_per_image()
        ));
    }
    out
}

/// Images discarded at the start of every benchmark arm.
pub const BENCH_WARMUP: usize = 3;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub config_id: String,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config_id: String,
    pub secs_per_image: f64,
    pub calls_per_image: f64,
    pub measured_images: usize,
}

/// Wall-clock seconds per image for each arm, single-threaded. `images`
/// includes the warm-up images. Results are sorted by `config_id`.
pub fn bench_runtime(
    arms: &[(BenchSpec, &dyn Denoiser)],
    stacks: &[BurstStack],
    images: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if stacks.is_empty() {
        return Err(Error::Config("benchmark needs at least one burst".into()));
    }
    if images <= BENCH_WARMUP {
        return Err(Error::Config(format!("benchmark needs more than {BENCH_WARMUP} images")));
    }
    let mut out = with_jobs(1, || {
        arms.iter()
            .map(|(spec, net)| {
                let mut secs = 0.0;
                let mut calls = 0usize;
                for i in 0..images {
                    let stack = &stacks[i % stacks.len()];
                    let started = Instant::now();
                    let run = e_bsrd_pipeline(stack, &spec.pipeline, *net, &image_rng(seed, i))?;
                    let dt = started.elapsed().as_secs_f64();
                    if i >= BENCH_WARMUP {
                        secs += dt;
                        calls += run.trace.total_calls();
                    }
                }
                let n = images - BENCH_WARMUP;
                Ok(BenchResult {
                    config_id: spec.config_id.clone(),
                    secs_per_image: secs / n as f64,
                    calls_per_image: calls as f64 / n as f64,
                    measured_images: n,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    out.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    Ok(out)
}

pub fn bench_csv(config_hash: &str, rows: &[BenchResult]) -> String {
    let mut out = String::from("config_hash,config_id,secs_per_image,calls_per_image,images\n");
    for r in rows {
        out.push_str(&format!(
            "{config_hash},{},{:.6},{},{}\n",
            r.config_id, r.secs_per_image, r.calls_per_image, r.measured_images
        ));
    }
    out
}

/// Standard three-arm runtime comparison: DDPM from step 100, EDM Heun with
/// 40 steps, and the one-step consistency student.
pub fn standard_bench_specs(cfg: &ExperimentConfig) -> Vec<BenchSpec> {
    let base = cfg.pipeline();
    vec![
        BenchSpec {
            config_id: "ddpm_tau100".into(),
            pipeline: PipelineConfig { sampler: SamplerKind::Ddpm, tau: 100, ..base.clone() },
        },
        BenchSpec {
            config_id: "edm_heun_tau40".into(),
            pipeline: PipelineConfig { sampler: SamplerKind::Edm, tau: 40, ..base.clone() },
        },
        BenchSpec {
            config_id: "cm_tcm1".into(),
            pipeline: PipelineConfig { sampler: SamplerKind::Cm, t_cm: 1, ..base },
        },
    ]
}
