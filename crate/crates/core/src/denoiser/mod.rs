//! The denoiser interface `D(x; σ, cond) → x̂₀` and its realisations:
//! closed-form posterior-mean oracles, the conditioned convolutional
//! [`TinyDenoiser`] and the point-cloud [`MlpDenoiser`].

mod conditioning;
mod mlp;
pub mod nn;
mod oracle;
mod params;
mod tiny;
mod train;

pub use conditioning::{encode_burst, ConditioningFeatures, COND_CHANNELS};
pub use mlp::MlpDenoiser;
pub use oracle::{GaussianPriorOracle, GmmOracle, PointMassOracle};
pub use params::Params;
pub use tiny::{TinyDenoiser, TinyGrads};
pub use train::{
    edm_loss_weight, pseudo_huber, train_denoiser, Adam, LossKind, SigmaSampler, Trainable, TrainConfig, TrainPair,
    TrainReport,
};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// EDM default data standard deviation for images in `[0, 1]`.
pub const SIGMA_DATA: f64 = 0.5;

pub trait Denoiser: Send + Sync {
    /// Denoise `x`. `sigmas` holds one shared level, or one level per row of
    /// the leading axis.
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], cond: Option<&ConditioningFeatures>) -> Result<Tensor>;

    fn denoise(&self, x: &Tensor, sigma: f64, cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        self.denoise_rows(x, &[sigma], cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        (**self).denoise_rows(x, sigmas, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        (**self).denoise_rows(x, sigmas, cond)
    }
}

/// Per-row σ lookup: returns `(row length, σ for row r)`.
pub(crate) fn row_sigmas<'a>(x: &Tensor, sigmas: &'a [f64]) -> Result<(usize, impl Fn(usize) -> f64 + 'a)> {
    let rows = x.dims()[0];
    let row_len = x.len() / rows;
    if sigmas.len() != 1 && sigmas.len() != rows {
        return shape_err(format!("{} sigmas for {rows} rows", sigmas.len()));
    }
    let shared = sigmas.len() == 1;
    Ok((row_len, move |r: usize| if shared { sigmas[0] } else { sigmas[r] }))
}

/// EDM preconditioning coefficients at noise level σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: if sigma > 0.0 { sigma.ln() / 4.0 } else { 0.0 },
        }
    }
}

/// `c_skip(σ)·x + c_out(σ)·raw`.
pub fn edm_precondition(x: &Tensor, sigma: f64, raw_net_output: &Tensor, sigma_data: f64) -> Result<Tensor> {
    let p = Precond::new(sigma, sigma_data);
    x.lincomb(p.c_skip as f32, raw_net_output, p.c_out as f32)
}

/// Spatial feature transform `γ ⊙ feat + β`.
pub fn sft_modulate(feat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    feat.same_shape(gamma)?;
    feat.same_shape(beta)?;
    let data = feat
        .data()
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((&f, &g), &b)| g * f + b)
        .collect();
    Tensor::new(feat.dims().to_vec(), data)
}
