use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bdl_core::baseline::baseline_sr;
use bdl_core::burst::{read_dataset, write_dataset, BurstSample};
use bdl_core::denoiser::Denoiser;
use bdl_core::distill::InitMode;
use bdl_core::experiment::{self as exp, ExperimentConfig, SweepAxis};
use bdl_core::metrics::MetricReport;
use bdl_core::samplers::SamplerKind;

#[derive(Parser)]
#[command(name = "bdl", about = "Burst SR diffusion toys: simulate, train, distill, sample, sweep, bench")]
struct Cli {
    /// Config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train_steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic burst dataset.
    Simulate {
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministic fusion baseline over a dataset directory.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the conditioned teacher denoiser.
    Train,
    /// Distil the consistency student from the teacher.
    Distill {
        #[arg(long)]
        init_mode: Option<InitMode>,
    },
    /// Run the full pipeline on a dataset (held-out split by default).
    Sample {
        #[arg(long)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long)]
        sigma_max: Option<f64>,
        #[arg(long)]
        tcm: Option<usize>,
        #[arg(long)]
        churn: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric table over one axis.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; defaults to the config's sweep list.
        #[arg(long)]
        values: Option<String>,
    },
    /// Secs/image for DDPM tau=100, EDM Heun tau=40 and CM T_CM=1.
    Bench {
        #[arg(long)]
        images: Option<usize>,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print every key with its value and origin.
    Dump,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    Ok(cfg.with_env_overrides()?)
}

/// Prepends a `config_hash` column to every line of `csv`.
fn hashed(csv: &str, hash: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let lead = if i == 0 { "config_hash" } else { hash };
        out.push_str(&format!("{lead},{line}\n"));
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<BurstSample>> {
    Ok(match dir {
        Some(d) => read_dataset(d)?,
        None => exp::test_set(cfg)?,
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Config { action: ConfigAction::Dump } => print!("{}", cfg.dump()),
        Cmd::Simulate { split, out } => {
            let (samples, name) = match split {
                Split::Train => (exp::train_set(&cfg)?, "train"),
                Split::Test => (exp::test_set(&cfg)?, "test"),
            };
            let dir = out.clone().unwrap_or_else(|| cfg.run_dir().join("data").join(name));
            write_dataset(&dir, &samples)?;
            println!("wrote {} bursts to {}", samples.len(), dir.display());
        }
        Cmd::Baseline { data, out } => {
            let samples = read_dataset(data)?;
            let dir = out.clone().unwrap_or_else(|| data.clone());
            fs::create_dir_all(dir.join("init"))?;
            let mut inits = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                let init = baseline_sr(&s.burst, cfg.scale_factor)?;
                init.save(dir.join("init").join(format!("{i:04}.btsr")))?;
                init.clamp(0.0, 1.0).save_png(dir.join("init").join(format!("{i:04}.png")))?;
                inits.push(init);
            }
            let targets: Vec<_> = samples.iter().map(|s| s.hr.clone()).collect();
            let report = MetricReport::evaluate(&inits, &targets)?;
            write(&dir.join("init").join("metrics.csv"), &hashed(&report.to_csv(), &cfg.hash()))?;
            println!("baseline PSNR {:.3} dB over {} images", report.psnr_summary().mean, inits.len());
        }
        Cmd::Train => {
            let data = exp::prepare_all(&exp::train_set(&cfg)?, cfg.scale_factor)?;
            let (net, report) = exp::train_teacher(&cfg, &data)?;
            net.save(Path::new(&cfg.teacher_checkpoint))?;
            write(&cfg.run_dir().join("train_loss.csv"), &hashed(&loss_csv(&report.losses), &cfg.hash()))?;
            println!("teacher saved to {}", cfg.teacher_checkpoint);
        }
        Cmd::Distill { init_mode } => {
            if let Some(m) = init_mode {
                cfg.init_mode = *m;
            }
            let teacher = exp::load_teacher(&cfg)?;
            let data = exp::prepare_all(&exp::train_set(&cfg)?, cfg.scale_factor)?;
            let (student, report) = exp::distill_student(&cfg, &teacher, &data)?;
            student.save(Path::new(&cfg.student_checkpoint))?;
            write(&cfg.run_dir().join("distill_loss.csv"), &hashed(&loss_csv(&report.losses), &cfg.hash()))?;
            println!("student saved to {} ({} teacher calls)", cfg.student_checkpoint, report.teacher_calls);
        }
        Cmd::Sample { sampler, tau, sigma_max, tcm, churn, seed, data, out } => {
            if let Some(v) = sampler {
                cfg.sampler = *v;
            }
            if let Some(v) = tau {
                cfg.tau = *v;
            }
            if let Some(v) = sigma_max {
                cfg.sigma_max = *v;
            }
            if let Some(v) = tcm {
                cfg.t_cm = *v;
            }
            if let Some(v) = churn {
                cfg.churn = *v;
            }
            if let Some(v) = seed {
                cfg.seed = *v;
            }
            let net = match cfg.sampler {
                SamplerKind::Cm => exp::load_student(&cfg)?,
                _ => exp::load_teacher(&cfg)?,
            };
            let samples = dataset(&cfg, data.as_deref())?;
            let eval = exp::evaluate(&samples, &cfg.pipeline(), &net, cfg.seed, cfg.jobs)?;
            let hash = cfg.hash();
            let dir = out.clone().unwrap_or_else(|| cfg.run_dir().join("sample"));
            fs::create_dir_all(&dir)?;
            for (i, (img, trace)) in eval.outputs.iter().zip(&eval.traces).enumerate() {
                img.save(dir.join(format!("{i:04}.btsr")))?;
                img.save_png(dir.join(format!("{i:04}.png")))?;
                write(&dir.join(format!("{i:04}_trace.csv")), &hashed(&trace.to_csv(), &hash))?;
            }
            write(&dir.join("metrics.csv"), &hashed(&eval.report.to_csv(), &hash))?;
            write(&dir.join("config.txt"), &cfg.dump())?;
            println!(
                "{} images -> {}: PSNR {:.3} dB, SSIM {:.4}, {} calls/image",
                eval.outputs.len(),
                dir.display(),
                eval.report.psnr_summary().mean,
                eval.report.ssim_summary().mean,
                eval.calls_per_image()
            );
        }
        Cmd::Sweep { axis, values } => {
            let values: Vec<f64> = match values {
                Some(v) => v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad sweep value {s:?}")))
                    .collect::<Result<_>>()?,
                None => exp::sweep_values(&cfg, *axis),
            };
            if values.is_empty() {
                bail!("no sweep values");
            }
            let teacher = exp::load_teacher(&cfg)?;
            let student = if *axis == SweepAxis::TCm { exp::load_student(&cfg)? } else { teacher.clone() };
            let test = exp::test_set(&cfg)?;
            let rows = exp::run_sweep(&cfg, *axis, &values, &teacher, &student, &test)?;
            let dir = cfg.run_dir().join(format!("sweep_{axis}"));
            for r in &rows {
                let sub = dir.join(format!("{}", r.value));
                fs::create_dir_all(&sub)?;
                if let Some(img) = r.eval.outputs.first() {
                    img.save_png(sub.join("0000.png"))?;
                }
                write(&sub.join("metrics.csv"), &hashed(&r.eval.report.to_csv(), &r.config_hash))?;
            }
            let csv = exp::sweep_csv(&rows);
            write(&dir.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Bench { images } => {
            let n = images.unwrap_or(cfg.bench_images);
            let (teacher, student) = match (exp::load_teacher(&cfg), exp::load_student(&cfg)) {
                (Ok(t), Ok(s)) => (t, s),
                _ => {
                    eprintln!("checkpoints missing; timing untrained networks (runtime does not depend on weights)");
                    (exp::new_denoiser(&cfg, cfg.seed), exp::new_denoiser(&cfg, cfg.seed.wrapping_add(1)))
                }
            };
            let stacks: Vec<_> = exp::test_set(&cfg)?.into_iter().map(|s| s.burst).collect();
            let specs = exp::standard_bench_specs(&cfg);
            let arms: Vec<(exp::BenchSpec, &dyn Denoiser)> = specs
                .into_iter()
                .map(|s| {
                    let net: &dyn Denoiser = if s.pipeline.sampler == SamplerKind::Cm { &student } else { &teacher };
                    (s, net)
                })
                .collect();
            let rows = exp::bench_runtime(&arms, &stacks, n, cfg.seed)?;
            let csv = exp::bench_csv(&cfg.hash(), &rows);
            write(&cfg.run_dir().join("bench.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
