use bdl_core::denoiser::{Denoiser, GaussianPriorOracle, LossKind, MlpDenoiser, PointMassOracle, SIGMA_DATA};
use bdl_core::distill::{consistency_distill, DistillConfig, DistillReport, DistillSample, InitMode};
use bdl_core::rng::RngStream;
use bdl_core::schedules::EdmSchedule;
use bdl_core::tensor::Tensor;

fn ladder() -> Vec<f64> {
    let mut s = EdmSchedule::new(18, 1.0, 0.002, 7.0).unwrap().sigmas().to_vec();
    s.pop();
    s
}

fn config(n_iters: usize, seed: u64) -> DistillConfig {
    DistillConfig {
        ladder: ladder(),
        n_iters,
        batch_size: 4,
        lr: 2e-3,
        ema_decay: 0.95,
        loss: LossKind::L2,
        huber_c: 0.03,
        init_mode: InitMode::FromNoise,
        seed,
    }
}

fn point_mass_config() -> DistillConfig {
    // Skip-regime ladder, the range the pipeline actually traverses.
    let top = 0.03;
    DistillConfig {
        ladder: DistillConfig::ladder_for(InitMode::FromInitSr, 18, top, 0.002).unwrap(),
        batch_size: 16,
        lr: 2e-2,
        ..config(1000, 3)
    }
}

fn point_mass_run() -> (MlpDenoiser, DistillReport, Tensor) {
    let star = Tensor::new(vec![2], vec![0.3, -0.2]).unwrap();
    let block = Tensor::from_fn(&[64, 2], |i| star.data()[i % 2]).unwrap();
    let data = vec![DistillSample { x0: block.clone(), init: block, cond: None }];
    let teacher = PointMassOracle::new(star.clone());
    let mut student = MlpDenoiser::new(2, 64, SIGMA_DATA, 1);
    let report = consistency_distill(&teacher, &mut student, &data, &point_mass_config()).unwrap();
    (student, report, star)
}

#[test]
fn point_mass_student_collapses_to_the_point() {
    let (student, report, star) = point_mass_run();
    assert_eq!(report.losses.len(), 1000);
    let mut rng = RngStream::new(77, 0);
    for _ in 0..100 {
        let sigma = (rng.uniform((0.002f64).ln(), (0.03f64).ln())).exp();
        let x = star.lincomb(1.0, &rng.gaussian(&[2]).unwrap(), sigma as f32).unwrap().reshape(&[1, 2]).unwrap();
        let out = student.denoise(&x, sigma, None).unwrap();
        for (o, s) in out.data().iter().zip(star.data()) {
            assert!((o - s).abs() < 0.02, "sigma {sigma}: {:?}", out.data());
        }
    }
}

#[test]
fn point_mass_loss_moving_average_does_not_increase() {
    let (_, report, _) = point_mass_run();
    // Window means with their standard errors; at a fixed learning rate the plateau
    // is noisy, so a later window may exceed an earlier one only within noise.
    let windows: Vec<(f64, f64)> = report
        .losses
        .chunks(100)
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, (v / n).sqrt())
        })
        .collect();
    for w in windows.windows(2) {
        assert!(w[1].0 <= w[0].0 + 2.0 * w[0].1.max(w[1].1), "{windows:?}");
    }
    assert!(windows[windows.len() - 1].0 < 0.5 * windows[0].0, "{windows:?}");
}

#[test]
fn gaussian_student_matches_flow_endpoint() {
    let prior = GaussianPriorOracle::standard(1);
    let root = RngStream::new(9, 0);
    let data: Vec<DistillSample> = (0..32)
        .map(|b| {
            let x0 = root.split(b).gaussian(&[64, 1]).unwrap();
            DistillSample { x0: x0.clone(), init: x0, cond: None }
        })
        .collect();
    let mut student = MlpDenoiser::new(1, 32, SIGMA_DATA, 2);
    consistency_distill(&prior, &mut student, &data, &config(2000, 4)).unwrap();
    for x in [-2.0f32, -1.0, 0.0, 1.0, 2.0] {
        let out = student.denoise(&Tensor::new(vec![1, 1], vec![x]).unwrap(), 1.0, None).unwrap().data()[0];
        let want = x / 2f32.sqrt();
        assert!((out - want).abs() < 0.05, "x = {x}: {out} vs {want}");
    }
}
