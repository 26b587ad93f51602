//! Closed-form posterior-mean denoisers `E[x₀ | x₀ + σε = x]`.

use super::{row_sigmas, ConditioningFeatures, Denoiser};
use crate::error::{param_err, shape_err, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian prior `N(mean, s²I)`. The mean is broadcast cyclically
/// over the flattened rows of `x`, so a length-`d` mean serves `[N, d]` input.
#[derive(Debug, Clone)]
pub struct GaussianPriorOracle {
    mean: Vec<f64>,
    variance: f64,
}

impl GaussianPriorOracle {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if mean.is_empty() {
            return param_err("empty prior mean");
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return param_err(format!("prior variance {variance}"));
        }
        Ok(Self { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim.max(1)], variance: 1.0 }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

impl Denoiser for GaussianPriorOracle {
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], _cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        let (row_len, sigma_of) = row_sigmas(x, sigmas)?;
        let s2 = self.variance;
        let m = self.mean.len();
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_mut(row_len).enumerate() {
            let sigma = sigma_of(r);
            let gain = s2 / (s2 + sigma * sigma);
            for (j, v) in row.iter_mut().enumerate() {
                let mu = self.mean[(r * row_len + j) % m];
                *v = (mu + gain * (*v as f64 - mu)) as f32;
            }
        }
        Ok(out)
    }
}

/// Mixture of isotropic Gaussians in `d` dimensions; `x` is `[N, d]`.
#[derive(Debug, Clone)]
pub struct GmmOracle {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GmmOracle {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return param_err("mixture needs matching non-empty weights, means and variances");
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return param_err("mixture means must share a non-zero dimension");
        }
        if weights.iter().any(|&w| !(w > 0.0)) || variances.iter().any(|&v| !(v > 0.0)) {
            return param_err("mixture weights and variances must be positive");
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { weights, means, variances })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Draws `n` samples as an `[n, d]` tensor.
    pub fn sample(&self, n: usize, rng: &mut crate::rng::RngStream) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u = rng.uniform(0.0, 1.0);
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let s = self.variances[k].sqrt();
            for j in 0..d {
                data.push((self.means[k][j] + s * rng.standard_normal()) as f32);
            }
        }
        Tensor::new(vec![n, d], data)
    }

    /// Posterior component responsibilities for one point at noise level σ.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let d = self.dim() as f64;
        let logs: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let v = self.variances[k] + sigma * sigma;
                let dist: f64 = x.iter().zip(&self.means[k]).map(|(a, m)| (a - m).powi(2)).sum();
                self.weights[k].ln() - 0.5 * d * v.ln() - 0.5 * dist / v
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

impl Denoiser for GmmOracle {
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], _cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        let (row_len, sigma_of) = row_sigmas(x, sigmas)?;
        let d = self.dim();
        if row_len != d {
            return shape_err(format!("mixture of dimension {d} given rows of length {row_len}"));
        }
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let sigma = sigma_of(r);
            let p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let resp = self.responsibilities(&p, sigma);
            for j in 0..d {
                let mut acc = 0.0;
                for (k, rk) in resp.iter().enumerate() {
                    let gain = self.variances[k] / (self.variances[k] + sigma * sigma);
                    acc += rk * (self.means[k][j] + gain * (p[j] - self.means[k][j]));
                }
                row[j] = acc as f32;
            }
        }
        Ok(out)
    }
}

/// Prior concentrated at one point: the posterior mean is that point.
#[derive(Debug, Clone)]
pub struct PointMassOracle {
    point: Tensor,
}

impl PointMassOracle {
    pub fn new(point: Tensor) -> Self {
        Self { point }
    }

    pub fn point(&self) -> &Tensor {
        &self.point
    }
}

impl Denoiser for PointMassOracle {
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], _cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        let _ = row_sigmas(x, sigmas)?;
        let p = self.point.data();
        if x.len() % p.len() != 0 {
            return shape_err(format!("point of {} values cannot tile input of {}", p.len(), x.len()));
        }
        Tensor::from_fn(x.dims(), |i| p[i % p.len()])
    }
}
