//! Acceptance suite: one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use bdl_core::denoiser::{Denoiser, GaussianPriorOracle, MlpDenoiser};
use bdl_core::distill::InitMode;
use bdl_core::experiment::point_toy::{distill_ablation, AblationConfig, PointToy};
use bdl_core::experiment::{
    bench_runtime, distill_student, evaluate, new_denoiser, prepare, prepare_all, standard_bench_specs, sweep_row_config,
    test_set, train_set, train_teacher, BenchSpec, ExperimentConfig, SweepAxis,
};
use bdl_core::metrics::{pearson, psnr, ssim};
use bdl_core::samplers::{edm_heun_sample, HeunOptions};
use bdl_core::schedules::{ddpm_skip_noise, DdpmSchedule, EdmSchedule};
use bdl_core::{RngStream, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean_var(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (m, v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn skip_noise_moments() -> Outcome {
    let sched = DdpmSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let x0 = Tensor::full(&[100_000], 1.0).unwrap();
    let mut worst = 0f64;
    for tau in [10, 100, 500] {
        let ab = sched.alpha_bar(tau);
        let out = ddpm_skip_noise(&x0, tau, &sched, &mut RngStream::new(tau as u64, 3)).unwrap();
        let (m, v) = mean_var(out.data());
        worst = worst.max((m / ab.sqrt() - 1.0).abs()).max((v / (1.0 - ab) - 1.0).abs());
    }
    outcome(worst <= 0.02, format!("worst relative moment error {:.4} (tol 0.02)", worst))
}

/// Least-squares slope of ln(err) against ln(h).
fn loglog_slope(h: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn solver_order() -> Outcome {
    // s = 1, x = 2 at σ₀ = 1: the flow endpoint is x·s/√(s² + σ₀²).
    let oracle = GaussianPriorOracle::standard(1);
    let want = 2.0 / 2f64.sqrt();
    let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
    let ns = [8usize, 16, 32, 64];
    let h: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
    let mut slopes = Vec::new();
    for euler_only in [false, true] {
        let err: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let sig: Vec<f64> = (0..=n).map(|i| 1.0 - i as f64 / n as f64).collect();
                let sched = EdmSchedule::from_sigmas(sig).unwrap();
                let opts = HeunOptions { churn: 0.0, euler_only };
                let (out, _) = edm_heun_sample(&x, &sched, &oracle, None, &mut RngStream::new(0, 0), opts).unwrap();
                (out.data()[0] as f64 - want).abs()
            })
            .collect();
        slopes.push(loglog_slope(&h, &err));
    }
    let pass = (slopes[0] - 2.0).abs() <= 0.3 && (slopes[1] - 1.0).abs() <= 0.3;
    outcome(pass, format!("heun slope {:.3}, euler slope {:.3}", slopes[0], slopes[1]))
}

fn mixture_recovery() -> Outcome {
    let toy = PointToy::standard();
    let gmm = &toy.gmm;
    let n = 20_000;
    let mut rng = RngStream::new(31, 0);
    let x = rng.gaussian(&[n, 2]).unwrap().scale(80.0);
    let sched = EdmSchedule::new(40, 80.0, 0.002, 7.0).unwrap();
    let (out, _) = edm_heun_sample(&x, &sched, gmm, None, &mut rng, HeunOptions::default()).unwrap();
    // Nearest-mean assignment; components are ~7 standard deviations apart.
    let k = gmm.weights().len();
    let mut count = vec![0usize; k];
    let mut sum = vec![[0f64; 2]; k];
    for p in out.data().chunks(2) {
        let d = |m: &Vec<f64>| (p[0] as f64 - m[0]).powi(2) + (p[1] as f64 - m[1]).powi(2);
        let c = (0..k).min_by(|&a, &b| d(&gmm.means()[a]).total_cmp(&d(&gmm.means()[b]))).unwrap();
        count[c] += 1;
        sum[c][0] += p[0] as f64;
        sum[c][1] += p[1] as f64;
    }
    let mut w_err = 0f64;
    let mut m_err = 0f64;
    for c in 0..k {
        w_err = w_err.max((count[c] as f64 / n as f64 - gmm.weights()[c]).abs());
        for j in 0..2 {
            m_err = m_err.max((sum[c][j] / count[c] as f64 - gmm.means()[c][j]).abs());
        }
    }
    outcome(
        w_err <= 0.03 && m_err <= 0.05,
        format!("weight error {:.4} (tol 0.03), mean error {:.4} (tol 0.05)", w_err, m_err),
    )
}

fn init_ablation() -> Outcome {
    let toy = PointToy::standard();
    let r = distill_ablation(&toy, (InitMode::FromInitSr, InitMode::FromNoise), &AblationConfig::default()).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    outcome(
        r.first_strictly_better(),
        format!(
            "W2 init-sr {:.4}, noise {:.4}, diff 95% CI [{:.4}, {:.4}]",
            mean(&r.w2_a),
            mean(&r.w2_b),
            r.diff.lo,
            r.diff.hi
        ),
    )
}

struct ImageToy {
    cfg: ExperimentConfig,
    teacher: bdl_core::denoiser::TinyDenoiser,
    student: bdl_core::denoiser::TinyDenoiser,
    test: Vec<bdl_core::burst::BurstSample>,
    train_time: Duration,
}

fn image_toy() -> ImageToy {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let data = prepare_all(&train_set(&cfg).unwrap(), cfg.scale_factor).unwrap();
    let (teacher, _) = train_teacher(&cfg, &data).unwrap();
    let (student, _) = distill_student(&cfg, &teacher, &data).unwrap();
    ImageToy { test: test_set(&cfg).unwrap(), cfg, teacher, student, train_time: t.elapsed() }
}

fn mean_psnr(toy: &ImageToy, axis: SweepAxis, value: f64, net: &dyn Denoiser) -> (f64, f64) {
    let c = sweep_row_config(&toy.cfg, axis, value);
    let e = evaluate(&toy.test, &c.pipeline(), net, c.seed, 0).unwrap();
    let corr = e.outputs.iter().zip(&e.inits).map(|(o, i)| pearson(o, i).unwrap()).sum::<f64>() / e.outputs.len() as f64;
    (e.report.psnr_summary().mean, corr)
}

fn one_step_parity(toy: &ImageToy) -> Outcome {
    let (teacher, _) = mean_psnr(toy, SweepAxis::Tau, 40.0, &toy.teacher);
    let cm: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&t| mean_psnr(toy, SweepAxis::TCm, t, &toy.student).0).collect();
    let gap = (cm[0] - teacher).abs();
    let drift = (cm[1] - cm[0]).abs().max((cm[2] - cm[0]).abs());
    outcome(
        gap <= 1.5 && drift < 0.3,
        format!(
            "teacher tau=40 {:.3} dB, T_CM=1/2/3 {:.3}/{:.3}/{:.3} dB, gap {:.3} (tol 1.5), drift {:.3} (tol 0.3); training {:.0} s",
            teacher,
            cm[0],
            cm[1],
            cm[2],
            gap,
            drift,
            toy.train_time.as_secs_f64()
        ),
    )
}

fn sigma_max_trend(toy: &ImageToy) -> Outcome {
    let levels = [0.005, 0.03, 0.2, 80.0];
    let rows: Vec<(f64, f64)> = levels.iter().map(|&s| mean_psnr(toy, SweepAxis::SigmaMax, s, &toy.teacher)).collect();
    let rises: Vec<f64> = rows.windows(2).map(|w| w[1].0 - w[0].0).filter(|&d| d > 0.0).collect();
    let monotone = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.1);
    let (hi, lo) = (rows[3].1, rows[0].1);
    let pass = monotone && hi < 0.1 && lo > 0.99;
    let psnrs: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.0)).collect();
    outcome(
        pass,
        format!(
            "psnr at {:?}: [{}] monotone {}; corr at 80 {:.4} (need < 0.1), at 0.005 {:.4} (need > 0.99)",
            levels,
            psnrs.join(", "),
            monotone,
            hi,
            lo
        ),
    )
}

fn runtime_scaling() -> Outcome {
    let cfg = ExperimentConfig::default();
    let net = new_denoiser(&cfg, 1);
    let stacks: Vec<_> = test_set(&cfg).unwrap().into_iter().map(|s| s.burst).collect();
    let arms: Vec<(BenchSpec, &dyn Denoiser)> =
        standard_bench_specs(&cfg).into_iter().map(|s| (s, &net as &dyn Denoiser)).collect();
    let rows = bench_runtime(&arms, &stacks, 8, 0).unwrap();
    let secs = |id: &str| rows.iter().find(|r| r.config_id.starts_with(id)).unwrap().secs_per_image;
    let (ddpm, heun, cm) = (secs("ddpm"), secs("edm"), secs("cm"));
    let ratio = heun / ddpm;
    let want = 79.0 / 100.0;
    let pass = ddpm > heun && heun > cm && ddpm / cm >= 20.0 && (ratio / want - 1.0).abs() <= 0.3;
    outcome(
        pass,
        format!(
            "secs/image ddpm {:.4}, heun {:.4}, cm {:.5}; ddpm/cm {:.1}x (need >= 20), heun/ddpm {:.3} (want {:.2} +-30%)",
            ddpm,
            heun,
            cm,
            ddpm / cm,
            ratio,
            want
        ),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = RngStream::new(88, 0);
    let mlp = MlpDenoiser::new(2, 32, 0.5, 4);
    let x = rng.gaussian(&[8, 2]).unwrap();
    let t = rng.gaussian(&[8, 2]).unwrap();
    let sig = [0.002, 0.01, 0.03, 0.1, 0.5, 1.0, 5.0, 80.0];
    let mut rows = mlp.gradient_check(&x, &sig, &t, 32, &mut rng).unwrap();
    let cfg = ExperimentConfig::default();
    let sample = &test_set(&cfg).unwrap()[0];
    let prepared = prepare(sample, cfg.scale_factor).unwrap();
    let net = new_denoiser(&cfg, 9);
    let noisy = prepared.x0.lincomb(1.0, &rng.gaussian(prepared.x0.dims()).unwrap(), 0.1).unwrap();
    rows.extend(net.gradient_check(&noisy, 0.1, prepared.cond.as_ref(), &prepared.x0, 32, &mut rng).unwrap());
    let worst = rows.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let checked: usize = rows.iter().map(|r| r.checked).sum();
    outcome(
        rows.iter().all(|r| r.max_rel_err < 1e-3),
        format!(
            "{} layer types, {} parameters, worst {:.2e} at {} (tol 1e-3)",
            rows.len(),
            checked,
            worst.max_rel_err,
            worst.layer
        ),
    )
}

fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    10.0 * (1.0 / (s / a.len() as f64)).log10()
}

fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = g[i][j] / total;
                    let (va, vb) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

fn metric_fidelity() -> Outcome {
    let mut rng = RngStream::new(4242, 0);
    let (mut dp, mut ds) = (0f64, 0f64);
    for _ in 0..50 {
        let a = rng.gaussian(&[1, 16, 16]).unwrap().map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let s = rng.uniform(0.01, 0.3) as f32;
        let b = a.lincomb(1.0, &rng.gaussian(&[1, 16, 16]).unwrap(), s).unwrap().clamp(0.0, 1.0);
        dp = dp.max((psnr(&a, &b, 1.0).unwrap().db() - psnr_oracle(&a, &b)).abs());
        let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        ds = ds.max((ssim(&a, &b).unwrap() - ssim_oracle(&to64(&a), &to64(&b), 16, 16)).abs());
    }
    let a = Tensor::full(&[3, 8, 8], 0.25).unwrap();
    let b = Tensor::full(&[3, 8, 8], 0.75).unwrap();
    let constant = psnr(&a, &b, 1.0).unwrap().db();
    let pass = dp < 1e-6 && ds < 1e-4 && (constant - 6.0206).abs() < 1e-4;
    outcome(
        pass,
        format!("psnr max diff {:.2e} (tol 1e-6), ssim max diff {:.2e} (tol 1e-4), constant-diff case {:.5} dB", dp, ds, constant),
    )
}

fn run(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let took = t.elapsed();
    let in_time = limit.map_or(true, |l| took <= l);
    let pass = o.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {:.0} s", l.as_secs_f64()));
    println!(
        "[{}] criterion {id} {name}: {} [{:.1} s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = vec![
        run(1, "skip-noise moments", Some(secs(10)), skip_noise_moments),
        run(2, "solver order", Some(secs(5)), solver_order),
        run(3, "mixture recovery", Some(secs(60)), mixture_recovery),
        run(4, "initialization ablation", Some(secs(600)), init_ablation),
    ];
    let t = Instant::now();
    let toy = image_toy();
    results.push(run(5, "one-step parity", Some(secs(1800).saturating_sub(t.elapsed())), || one_step_parity(&toy)));
    results.push(run(6, "sigma_max trend", None, || sigma_max_trend(&toy)));
    results.push(run(7, "runtime scaling", None, runtime_scaling));
    results.push(run(8, "gradient check", Some(secs(30)), gradient_check));
    results.push(run(9, "metric fidelity", None, metric_fidelity));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    // Failures are reported above; set BDL_ACCEPTANCE_STRICT=1 to turn them into a non-zero exit.
    if passed != results.len() && std::env::var("BDL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
