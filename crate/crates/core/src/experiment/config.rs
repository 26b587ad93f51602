//! Flat `key = value` experiment configuration with per-field provenance.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::burst::DegradationParams;
use crate::denoiser::LossKind;
use crate::distill::InitMode;
use crate::error::{Error, Result};
use crate::samplers::{PipelineConfig, SamplerKind};

/// Where a default value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Stated in the published method description.
    Published,
    /// Standard value of the underlying technique.
    Convention,
    /// Picked for this desk-scale implementation.
    Chosen,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Published => "published",
            Origin::Convention => "convention",
            Origin::Chosen => "chosen",
        })
    }
}

/// Comma-separated list value.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| v.parse::<T>().map_err(|_| format!("bad list element {v:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! config {
    ($( $field:ident : $ty:ty = $default:expr, $origin:ident, $help:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $( #[doc = $help] pub $field: $ty, )*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $( $field: $default.parse().expect(concat!("default for ", stringify!($field))), )* }
            }
        }

        impl ExperimentConfig {
            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.parse().map_err(|e| {
                            Error::Config(format!("{key} = {value:?}: {e}"))
                        })?;
                    } )*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// `(key, current value, origin of the default, help)` for every field.
            pub fn entries(&self) -> Vec<(&'static str, String, Origin, &'static str)> {
                vec![ $( (stringify!($field), self.$field.to_string(), Origin::$origin, $help), )* ]
            }
        }
    };
}

config! {
    seed: u64 = "0", Chosen, "Root seed; overridden by BDL_SEED.";
    crop: usize = "32", Chosen, "HR image side in pixels.";
    scale_factor: usize = "2", Chosen, "HR to RAW-plane ratio is 2x this factor.";
    burst_size: usize = "8", Chosen, "Frames per burst.";
    max_translation: f64 = "3", Chosen, "Maximum per-frame shift in HR pixels.";
    max_rotation: f64 = "1", Chosen, "Maximum per-frame rotation in degrees.";
    noise_sigma: f64 = "0.02", Chosen, "Sensor noise standard deviation.";
    train_images: usize = "64", Chosen, "Training set size.";
    test_images: usize = "16", Chosen, "Held-out evaluation set size.";
    runs_dir: String = "runs", Chosen, "Root directory for experiment outputs.";
    teacher_checkpoint: String = "runs/teacher", Chosen, "Teacher denoiser checkpoint directory.";
    student_checkpoint: String = "runs/student", Chosen, "Consistency student checkpoint directory.";
    sampler: SamplerKind = "edm", Published, "Reverse process: ddpm, edm or cm.";
    tau: usize = "40", Published, "EDM steps, or the DDPM start step.";
    sigma_max: f64 = "0.03", Published, "Skip-start noise level.";
    sigma_min: f64 = "0.002", Convention, "Smallest nonzero EDM level.";
    rho: f64 = "7", Convention, "EDM schedule curvature.";
    churn: f64 = "0", Chosen, "EDM stochastic churn.";
    t_cm: usize = "1", Published, "Consistency refinement iterations.";
    ddpm_steps: usize = "1000", Published, "DDPM schedule length T.";
    ddpm_beta_start: f64 = "0.0001", Convention, "First DDPM beta.";
    ddpm_beta_end: f64 = "0.02", Convention, "Last DDPM beta.";
    sigma_data: f64 = "0.5", Convention, "Data standard deviation in the preconditioning.";
    cond_scale: f64 = "1", Chosen, "Strength of the burst-feature modulation.";
    train_steps: usize = "3000", Chosen, "Teacher optimiser steps.";
    train_batch: usize = "8", Chosen, "Teacher batch size.";
    train_lr: f64 = "0.001", Chosen, "Teacher learning rate.";
    train_p_mean: f64 = "-3.912023005428146", Chosen, "Mean of ln(sigma) during training (ln 0.02).";
    train_p_std: f64 = "1", Chosen, "Std of ln(sigma) during training.";
    train_sigma_max: f64 = "1", Chosen, "Upper truncation of the training sigma distribution.";
    distill_iters: usize = "2000", Chosen, "Consistency distillation iterations.";
    distill_batch: usize = "4", Chosen, "Distillation batch size.";
    distill_lr: f64 = "0.0002", Chosen, "Distillation learning rate.";
    distill_levels: usize = "18", Chosen, "Levels in the distillation ladder.";
    ema_decay: f64 = "0.95", Convention, "Target network EMA decay.";
    distill_loss: LossKind = "pseudo_huber", Chosen, "Distillation distance: l2 or pseudo_huber.";
    huber_c: f64 = "0.03", Chosen, "Pseudo-Huber constant.";
    init_mode: InitMode = "init-sr", Published, "Distillation anchor: init-sr or noise.";
    warm_start: bool = "true", Chosen, "Initialise the student from the teacher weights.";
    sweep_sigma_max: List<f64> = "80,0.2,0.08,0.05,0.03,0.01,0.005", Published, "sigma_max sweep values.";
    sweep_tau: List<usize> = "1,2,3,5,10,20,40", Chosen, "tau sweep values.";
    sweep_t_cm: List<usize> = "1,2,3,4,5,11", Published, "T_CM sweep values.";
    bench_images: usize = "23", Chosen, "Images per benchmark arm; the first 3 are warm-up.";
    jobs: usize = "1", Chosen, "Worker threads for per-image work.";
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `BDL_SEED` if set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var("BDL_SEED") {
            self.set("seed", &v)?;
        }
        Ok(self)
    }

    /// Every field with its origin, in `key = value  # origin: help` form.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v, origin, help) in self.entries() {
            out.push_str(&format!("{k} = {v}  # {origin}: {help}\n"));
        }
        out
    }

    /// Stable hash of everything that affects results (`jobs` excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v, _, _) in self.entries() {
            if k != "jobs" {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.runs_dir).join(self.hash())
    }

    pub fn degradation(&self) -> DegradationParams {
        DegradationParams {
            max_translation: self.max_translation,
            max_rotation: self.max_rotation,
            scale_factor: self.scale_factor,
            noise_sigma: self.noise_sigma,
            burst_size: self.burst_size,
            seed: self.seed,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            sampler: self.sampler,
            scale_factor: self.scale_factor,
            tau: self.tau,
            sigma_max: self.sigma_max,
            sigma_min: self.sigma_min,
            rho: self.rho,
            churn: self.churn,
            t_cm: self.t_cm,
            ddpm_steps: self.ddpm_steps,
            ddpm_beta: (self.ddpm_beta_start, self.ddpm_beta_end),
        }
    }
}
