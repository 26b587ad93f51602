use bdl_core::denoiser::{GaussianPriorOracle, GmmOracle};
use bdl_core::distill::InitMode;
use bdl_core::experiment::point_toy::{distill_point_student, w2, AblationConfig, PointToy};
use bdl_core::rng::RngStream;
use bdl_core::samplers::{cm_sample, ddpm_reverse, edm_heun_sample, DdpmOptions, HeunOptions};
use bdl_core::schedules::{DdpmSchedule, EdmSchedule};
use bdl_core::tensor::Tensor;

fn covariance_2d(x: &Tensor) -> [[f64; 2]; 2] {
    let n = x.dims()[0] as f64;
    let d = x.data();
    let m = [0, 1].map(|j| d.iter().skip(j).step_by(2).map(|&v| v as f64).sum::<f64>() / n);
    let mut c = [[0.0; 2]; 2];
    for p in d.chunks_exact(2) {
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += (p[a] as f64 - m[a]) * (p[b] as f64 - m[b]) / (n - 1.0);
            }
        }
    }
    c
}

#[test]
fn ddpm_reverse_preserves_gaussian_prior() {
    let sched = DdpmSchedule::linear(100, 1e-4, 0.02).unwrap();
    let oracle = GaussianPriorOracle::standard(2);
    let mut rng = RngStream::new(4, 0);
    // The marginal at every step of the forward chain is N(0, I) for this prior.
    let x = rng.gaussian(&[20_000, 2]).unwrap();
    let (out, trace) = ddpm_reverse(&x, 100, &sched, &oracle, None, &mut rng, DdpmOptions::default()).unwrap();
    assert_eq!(trace.total_calls(), 100);
    let c = covariance_2d(&out);
    assert!((c[0][0] - 1.0).abs() < 0.05 && (c[1][1] - 1.0).abs() < 0.05, "{c:?}");
    assert!(c[0][1].abs() < 0.05, "{c:?}");
}

/// Nearest-mean assignment; returns (weights, means).
pub fn component_stats(gmm: &GmmOracle, x: &Tensor) -> (Vec<f64>, Vec<[f64; 2]>) {
    let k = gmm.weights().len();
    let mut count = vec![0usize; k];
    let mut sum = vec![[0.0f64; 2]; k];
    for p in x.data().chunks_exact(2) {
        let p = [p[0] as f64, p[1] as f64];
        let j = (0..k)
            .min_by(|&a, &b| {
                let da = (p[0] - gmm.means()[a][0]).powi(2) + (p[1] - gmm.means()[a][1]).powi(2);
                let db = (p[0] - gmm.means()[b][0]).powi(2) + (p[1] - gmm.means()[b][1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        count[j] += 1;
        sum[j][0] += p[0];
        sum[j][1] += p[1];
    }
    let n = x.dims()[0] as f64;
    let weights = count.iter().map(|&c| c as f64 / n).collect();
    let means = sum.iter().zip(&count).map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64]).collect();
    (weights, means)
}

#[test]
fn heun_from_pure_noise_recovers_mixture() {
    let gmm = PointToy::standard().gmm;
    let mut rng = RngStream::new(6, 0);
    let x = rng.gaussian(&[4000, 2]).unwrap().scale(80.0);
    let sched = EdmSchedule::new(40, 80.0, 0.002, 7.0).unwrap();
    let (out, trace) = edm_heun_sample(&x, &sched, &gmm, None, &mut rng, HeunOptions::default()).unwrap();
    assert_eq!(trace.total_calls(), 79);
    let (w, m) = component_stats(&gmm, &out);
    for j in 0..2 {
        assert!((w[j] - gmm.weights()[j]).abs() < 0.05, "{w:?}");
        for a in 0..2 {
            assert!((m[j][a] - gmm.means()[j][a]).abs() < 0.05, "{m:?}");
        }
    }
}

#[test]
fn one_more_consistency_step_does_not_degrade() {
    let toy = PointToy { sigma_max: 0.03, ..PointToy::standard() };
    let cfg = AblationConfig { seed: 2, ..Default::default() };
    let (student, _) = distill_point_student(&toy, InitMode::FromInitSr, &cfg).unwrap();
    let mut one = 0.0;
    let mut two = 0.0;
    for k in 0..8u64 {
        let root = RngStream::new(30 + k, 0);
        let (_, init) = toy.data(256, &mut root.split(0)).unwrap();
        let teacher = toy.teacher_samples(&init, &mut root.split(1)).unwrap();
        let (a, _) = cm_sample(&init, &student, &[0.03], None, &mut root.split(2)).unwrap();
        let (b, tb) = cm_sample(&init, &student, &[0.03, 0.01], None, &mut root.split(2)).unwrap();
        assert_eq!(tb.total_calls(), 2);
        one += w2(&a, &teacher).unwrap();
        two += w2(&b, &teacher).unwrap();
    }
    assert!(two <= 1.2 * one, "T_CM=2 {two} vs T_CM=1 {one}");
}
