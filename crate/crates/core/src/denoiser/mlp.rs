//! Small preconditioned MLP for point clouds `[N, d]` (the 1-D/2-D toys).

use super::nn::{silu, silu_grad, Linear, Real};
use super::train::{finite_difference_check, GradCheck, Trainable};
use super::{row_sigmas, ConditioningFeatures, Denoiser, Params, Precond};
use crate::error::{shape_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    params: Params,
    dim: usize,
    hidden: usize,
    pub sigma_data: f64,
}

struct Cache<T> {
    pcs: Vec<Precond>,
    input: Vec<T>,
    pre1: Vec<T>,
    a1: Vec<T>,
    pre2: Vec<T>,
    a2: Vec<T>,
}

impl MlpDenoiser {
    pub fn new(dim: usize, hidden: usize, sigma_data: f64, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 0x3170);
        let mut params = Params::new();
        for (i, (fi, fo)) in [(dim + 1, hidden), (hidden, hidden), (hidden, dim)].into_iter().enumerate() {
            let gain = if i == 2 { 0.1 } else { 2.0 };
            let std = (gain / fi as f64).sqrt();
            params.push(
                format!("fc{i}.weight"),
                Tensor::from_fn(&[fo, fi], |_| (std * rng.standard_normal()) as f32).expect("non-empty"),
            );
            params.push(format!("fc{i}.bias"), Tensor::zeros(&[fo]).expect("non-empty"));
        }
        Self { params, dim, hidden, sigma_data }
    }

    pub fn from_params(params: Params, sigma_data: f64) -> Result<Self> {
        if params.len() != 6 {
            return Err(Error::Format("mlp checkpoint needs 6 tensors".into()));
        }
        let hidden = params.get(0).dims()[0];
        let dim = params.get(0).dims()[1] - 1;
        let reference = Self::new(dim, hidden, sigma_data, 0);
        if params.iter().zip(reference.params.iter()).any(|((n, t), (rn, rt))| n != rn || t.dims() != rt.dims()) {
            return Err(Error::Format("mlp checkpoint layout mismatch".into()));
        }
        Ok(Self { params, dim, hidden, sigma_data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn layers(&self) -> [Linear; 3] {
        [
            Linear { fan_in: self.dim + 1, fan_out: self.hidden },
            Linear { fan_in: self.hidden, fan_out: self.hidden },
            Linear { fan_in: self.hidden, fan_out: self.dim },
        ]
    }

    fn forward<T: Real>(&self, w: &[&[T]], x: &[T], sig: &[f64]) -> (Vec<T>, Cache<T>) {
        let d = self.dim;
        let rows = sig.len();
        let pcs: Vec<Precond> = sig.iter().map(|&s| Precond::new(s, self.sigma_data)).collect();
        let mut input = Vec::with_capacity(rows * (d + 1));
        for (r, pc) in pcs.iter().enumerate() {
            input.extend(x[r * d..(r + 1) * d].iter().map(|&v| v * T::of(pc.c_in)));
            input.push(T::of(pc.c_noise));
        }
        let [l0, l1, l2] = self.layers();
        let pre1 = l0.forward(&input, rows, w[0], w[1]);
        let a1: Vec<T> = pre1.iter().map(|&v| silu(v)).collect();
        let pre2 = l1.forward(&a1, rows, w[2], w[3]);
        let a2: Vec<T> = pre2.iter().map(|&v| silu(v)).collect();
        let f = l2.forward(&a2, rows, w[4], w[5]);
        let mut out = Vec::with_capacity(x.len());
        for (r, pc) in pcs.iter().enumerate() {
            for j in 0..d {
                let i = r * d + j;
                out.push(T::of(pc.c_skip) * x[i] + T::of(pc.c_out) * f[i]);
            }
        }
        (out, Cache { pcs, input, pre1, a1, pre2, a2 })
    }

    fn backward<T: Real>(&self, w: &[&[T]], c: &Cache<T>, grad_d: &[T]) -> Vec<Vec<T>> {
        let d = self.dim;
        let rows = c.pcs.len();
        let [l0, l1, l2] = self.layers();
        let gf: Vec<T> = grad_d.iter().enumerate().map(|(i, &g)| g * T::of(c.pcs[i / d].c_out)).collect();
        let (gw2, gb2, ga2) = l2.backward(&c.a2, rows, w[4], &gf);
        let gp2: Vec<T> = ga2.iter().zip(&c.pre2).map(|(&g, &p)| g * silu_grad(p)).collect();
        let (gw1, gb1, ga1) = l1.backward(&c.a1, rows, w[2], &gp2);
        let gp1: Vec<T> = ga1.iter().zip(&c.pre1).map(|(&g, &p)| g * silu_grad(p)).collect();
        let (gw0, gb0, _) = l0.backward(&c.input, rows, w[0], &gp1);
        vec![gw0, gb0, gw1, gb1, gw2, gb2]
    }

    fn check(&self, x: &Tensor, sigmas: &[f64]) -> Result<Vec<f64>> {
        if x.dims().len() != 2 || x.dims()[1] != self.dim {
            return shape_err(format!("mlp of dimension {} given {:?}", self.dim, x.dims()));
        }
        let (_, sigma_of) = row_sigmas(x, sigmas)?;
        let sig: Vec<f64> = (0..x.dims()[0]).map(sigma_of).collect();
        if sig.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Parameter("sigma must be >= 0".into()));
        }
        Ok(sig)
    }

    pub fn gradient_check(
        &self,
        x: &Tensor,
        sigmas: &[f64],
        target: &Tensor,
        per_layer: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<GradCheck>> {
        let sig = self.check(x, sigmas)?;
        x.same_shape(target)?;
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let t64: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
        let eval = |p: &[Vec<f64>]| {
            let w: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
            let (d, cache) = self.forward(&w, &x64, &sig);
            let n = d.len() as f64;
            let loss = d.iter().zip(&t64).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
            let g: Vec<f64> = d.iter().zip(&t64).map(|(a, b)| 2.0 * (a - b) / n).collect();
            (loss, self.backward(&w, &cache, &g))
        };
        let p64: Vec<Vec<f64>> = (0..6).map(|i| self.params.slice(i).iter().map(|&v| v as f64).collect()).collect();
        let groups = vec![("linear.weight", vec![0, 2, 4]), ("linear.bias", vec![1, 3, 5])];
        Ok(finite_difference_check(&p64, &groups, per_layer, rng, eval))
    }
}

impl Denoiser for MlpDenoiser {
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], _cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        let sig = self.check(x, sigmas)?;
        let w: Vec<&[f32]> = (0..6).map(|i| self.params.slice(i)).collect();
        let (mut out, _) = self.forward(&w, x.data(), &sig);
        // Exact identity at σ = 0 regardless of rounding in c_skip·x.
        for (r, &s) in sig.iter().enumerate() {
            if s == 0.0 {
                out[r * self.dim..(r + 1) * self.dim].copy_from_slice(&x.data()[r * self.dim..(r + 1) * self.dim]);
            }
        }
        let t = Tensor::new(x.dims().to_vec(), out)?;
        t.ensure_finite("mlp denoiser output")?;
        Ok(t)
    }
}

impl Trainable for MlpDenoiser {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn value_and_grad(
        &self,
        x: &Tensor,
        sigmas: &[f64],
        _cond: Option<&ConditioningFeatures>,
        loss: &mut dyn FnMut(&Tensor) -> Result<(f64, Tensor)>,
    ) -> Result<(f64, Params)> {
        let sig = self.check(x, sigmas)?;
        let w: Vec<&[f32]> = (0..6).map(|i| self.params.slice(i)).collect();
        let (d, cache) = self.forward(&w, x.data(), &sig);
        let d = Tensor::new(x.dims().to_vec(), d)?;
        let (value, grad_d) = loss(&d)?;
        d.same_shape(&grad_d)?;
        let grads = self.backward(&w, &cache, grad_d.data());
        let mut out = self.params.zeros_like();
        for (i, g) in grads.into_iter().enumerate() {
            out.get_mut(i).data_mut().copy_from_slice(&g);
        }
        Ok((value, out))
    }
}
