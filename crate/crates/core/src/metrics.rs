//! PSNR, SSIM and the 2-D Wasserstein-2 distance used on toy problems.

use std::fmt;

use crate::error::{param_err, shape_err, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// PSNR in dB, or `Identical` when the mean squared error is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    /// Decibels, with `Identical` mapped to `+inf`.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Identical => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.4}"),
        }
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<Psnr> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (peak * peak / m).log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let t = i as f64 - half;
        *v = (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-region separable filter of an `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| src[y * w + x + i] * k[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| rows[(y + i) * ow + x] * k[i]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03,
/// data range 1) over the fully covered region, averaged over channels.
/// Accepts `[H,W]` or `[C,H,W]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = match a.dims() {
        &[h, w] => (1, h, w),
        &[c, h, w] => (c, h, w),
        d => return shape_err(format!("ssim needs [H,W] or [C,H,W], got {d:?}")),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let n = h * w;
    let to64 = |t: &Tensor, ch: usize| -> Vec<f64> { t.data()[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).collect() };
    let total: f64 = (0..c).map(|ch| ssim_plane(&to64(a, ch), &to64(b, ch), h, w, 1.0)).sum();
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    ExactAssignment,
    Sliced { projections: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2 {
    pub value: f64,
    pub method: W2Method,
}

pub const EXACT_W2_LIMIT: usize = 4096;
const SLICED_PROJECTIONS: usize = 64;

/// Wasserstein-2 distance between two equally sized 2-D sample sets: exact
/// optimal assignment up to [`EXACT_W2_LIMIT`] points, sliced W₂ over 64
/// evenly spaced directions beyond.
pub fn wasserstein2_2d(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<W2> {
    if a.is_empty() || b.is_empty() {
        return param_err("W2 needs non-empty sample sets");
    }
    if a.len() != b.len() {
        return param_err(format!("W2 needs equal sample counts, got {} and {}", a.len(), b.len()));
    }
    let n = a.len();
    if n > EXACT_W2_LIMIT {
        return Ok(W2 {
            value: sliced_w2(a, b, SLICED_PROJECTIONS),
            method: W2Method::Sliced { projections: SLICED_PROJECTIONS },
        });
    }
    let cost = |i: usize, j: usize| {
        let dx = a[i][0] - b[j][0];
        let dy = a[i][1] - b[j][1];
        dx * dx + dy * dy
    };
    let matrix: Vec<f64> = (0..n * n).map(|k| cost(k / n, k % n)).collect();
    let assignment = min_cost_assignment(n, &matrix);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
    Ok(W2 {
        value: (total / n as f64).max(0.0).sqrt(),
        method: W2Method::ExactAssignment,
    })
}

fn sliced_w2(a: &[[f64; 2]], b: &[[f64; 2]], projections: usize) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for k in 0..projections {
        let ang = std::f64::consts::PI * k as f64 / projections as f64;
        let (s, c) = ang.sin_cos();
        let mut pa: Vec<f64> = a.iter().map(|p| c * p[0] + s * p[1]).collect();
        let mut pb: Vec<f64> = b.iter().map(|p| c * p[0] + s * p[1]).collect();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        acc += pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    }
    (acc / projections as f64).sqrt()
}

/// Hungarian algorithm with potentials (shortest augmenting paths), O(n³).
/// Returns `row -> column`.
fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based internally; column 0 is the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui = u[i0];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    assignment
}

/// Per-image metric row plus aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    pub w2: Option<W2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub image_id: usize,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
}

fn summarize(values: impl Iterator<Item = f64>) -> Summary {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return Summary { mean: f64::NAN, stddev: f64::NAN };
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    Summary { mean, stddev: var.sqrt() }
}

impl MetricReport {
    /// Scores `outputs[i]` against `targets[i]`.
    pub fn evaluate(outputs: &[Tensor], targets: &[Tensor]) -> Result<Self> {
        if outputs.len() != targets.len() {
            return shape_err(format!("{} outputs vs {} targets", outputs.len(), targets.len()));
        }
        let rows = outputs
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(image_id, (o, t))| {
                Ok(ImageMetrics {
                    image_id,
                    psnr: psnr(o, t, 1.0)?,
                    ssim: ssim(o, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, w2: None })
    }

    /// Aggregate PSNR over finite rows (identical pairs are excluded).
    pub fn psnr_summary(&self) -> Summary {
        summarize(self.rows.iter().map(|r| r.psnr.db()).filter(|v| v.is_finite()))
    }

    pub fn ssim_summary(&self) -> Summary {
        summarize(self.rows.iter().map(|r| r.ssim))
    }

    /// `image_id,psnr_db,ssim` rows followed by `mean` and `stddev` footer rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6}\n", r.image_id, r.psnr, r.ssim));
        }
        let p = self.psnr_summary();
        let q = self.ssim_summary();
        s.push_str(&format!("mean,{:.4},{:.6}\n", p.mean, q.mean));
        s.push_str(&format!("stddev,{:.4},{:.6}\n", p.stddev, q.stddev));
        if let Some(w) = self.w2 {
            let method = match w.method {
                W2Method::ExactAssignment => "exact".to_string(),
                W2Method::Sliced { projections } => format!("sliced{projections}"),
            };
            s.push_str(&format!("w2_{method},{:.6},\n", w.value));
        }
        s
    }
}

/// Pearson correlation of two equally shaped tensors (0 when either is constant).
pub fn pearson(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Percentile bootstrap confidence interval of a sample mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, rng: &mut RngStream) -> Result<BootstrapCi> {
    if values.is_empty() || resamples == 0 {
        return param_err("bootstrap needs values and at least one resample");
    }
    if !(level > 0.0 && level < 1.0) {
        return param_err(format!("confidence level {level} outside (0, 1)"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.index(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(BootstrapCi { mean, lo: at(tail), hi: at(1.0 - tail), level })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identical_images_use_sentinel() {
        let a = Tensor::full(&[3, 4, 4], 0.2).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr::Identical);
    }

    #[test]
    fn constant_half_difference_is_6_0206_db() {
        let a = Tensor::full(&[3, 8, 8], 0.25).unwrap();
        let b = Tensor::full(&[3, 8, 8], 0.75).unwrap();
        let Psnr::Db(v) = psnr(&a, &b, 1.0).unwrap() else { panic!() };
        assert!((v - 6.0206).abs() < 1e-4, "{v}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[3, 4, 4]).unwrap();
        let b = Tensor::zeros(&[3, 4, 5]).unwrap();
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_of_identical_is_one() {
        let mut rng = RngStream::new(0, 0);
        let a = rng.gaussian(&[3, 16, 16]).unwrap().map(|v| 0.5 + 0.1 * v);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(&[1, 10, 20]).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_of_inverted_binary_texture_is_low() {
        let a = Tensor::from_fn(&[1, 32, 32], |i| (((i / 32) / 2 + (i % 32) / 3) % 2) as f32).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.1);
    }

    #[test]
    fn w2_basics() {
        let a = vec![[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]];
        assert_eq!(wasserstein2_2d(&a, &a).unwrap().value, 0.0);
        let p = vec![[0.0, 0.0]; 10];
        let q = vec![[3.0, 4.0]; 10];
        assert!((wasserstein2_2d(&p, &q).unwrap().value - 5.0).abs() < 1e-12);
        assert!(wasserstein2_2d(&[], &[]).is_err());
        assert!(wasserstein2_2d(&a, &p).is_err());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..20 {
            let n = 6;
            let pts: Vec<[f64; 2]> = (0..2 * n).map(|_| [rng.standard_normal(), rng.standard_normal()]).collect();
            let (a, b) = pts.split_at(n);
            let cost = |i: usize, j: usize| (a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2);
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::MAX;
            permute(&mut perm, 0, &mut |p| {
                best = best.min(p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum());
            });
            let got = wasserstein2_2d(a, b).unwrap().value;
            assert!((got * got * n as f64 - best).abs() < 1e-9);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn sliced_method_used_above_limit() {
        let a: Vec<[f64; 2]> = (0..EXACT_W2_LIMIT + 1).map(|i| [i as f64 * 1e-3, 0.0]).collect();
        let w = wasserstein2_2d(&a, &a).unwrap();
        assert_eq!(w.method, W2Method::Sliced { projections: 64 });
        assert_eq!(w.value, 0.0);
    }

    #[test]
    fn csv_has_footer() {
        let a = Tensor::full(&[3, 12, 12], 0.2).unwrap();
        let b = Tensor::full(&[3, 12, 12], 0.3).unwrap();
        let r = MetricReport::evaluate(&[a.clone(), a.clone()], &[b, a]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("image_id,psnr_db,ssim\n0,20.0000,"));
        assert!(csv.contains("\n1,identical,1.000000\n"));
        assert!(csv.contains("\nmean,20.0000,"));
    }
}
