//! Three-level convolutional encoder–decoder (16/32/64 channels) with EDM
//! preconditioning and SFT conditioning at every decoder scale.

use std::path::Path;

use super::nn::{
    avgpool2, avgpool2_backward, silu_backward, silu_map, upsample2, upsample2_backward, Conv, FMap, Real,
};
use super::train::{finite_difference_check, GradCheck, Trainable};
use super::{row_sigmas, ConditioningFeatures, Denoiser, Params, Precond, COND_CHANNELS, SIGMA_DATA};
use crate::error::{shape_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const WIDTHS: [usize; 3] = [16, 32, 64];

// Parameter slots.
const IN_W: usize = 0;
const IN_B: usize = 1;
const IN_E: usize = 2;
const E1_W: usize = 3;
const E1_B: usize = 4;
const E1_E: usize = 5;
const E2_W: usize = 6;
const E2_B: usize = 7;
const E2_E: usize = 8;
const D1_W: usize = 9;
const D1_B: usize = 10;
const D1_E: usize = 11;
const D0_W: usize = 12;
const D0_B: usize = 13;
const D0_E: usize = 14;
const OUT_W: usize = 15;
const OUT_B: usize = 16;
/// First slot of the SFT block at scale k: gamma weight, gamma bias, beta weight, beta bias.
const fn sft_slot(k: usize) -> usize {
    17 + 4 * (2 - k)
}
const N_SLOTS: usize = 29;

fn conv_in() -> Conv {
    Conv { cin: 3, cout: WIDTHS[0], k: 3 }
}
fn conv_e1() -> Conv {
    Conv { cin: WIDTHS[0], cout: WIDTHS[1], k: 3 }
}
fn conv_e2() -> Conv {
    Conv { cin: WIDTHS[1], cout: WIDTHS[2], k: 3 }
}
fn conv_d1() -> Conv {
    Conv { cin: WIDTHS[2], cout: WIDTHS[1], k: 3 }
}
fn conv_d0() -> Conv {
    Conv { cin: WIDTHS[1], cout: WIDTHS[0], k: 3 }
}
fn conv_out() -> Conv {
    Conv { cin: WIDTHS[0], cout: 3, k: 3 }
}
fn sft_conv(k: usize) -> Conv {
    Conv { cin: COND_CHANNELS, cout: WIDTHS[k], k: 1 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    params: Params,
    pub sigma_data: f64,
    /// Multiplier on the SFT modulation strength.
    pub cond_scale: f64,
}

/// Gradients in the same layout as [`TinyDenoiser::params`].
pub type TinyGrads = Params;

/// Conv output plus per-channel noise embedding, before the activation.
struct Stage<T> {
    cols: Vec<T>,
    pre: FMap<T>,
}

struct Sft<T> {
    /// Input to the modulation.
    feat: FMap<T>,
    gamma: Vec<T>,
}

struct Cache<T> {
    pc: Precond,
    s0: Stage<T>,
    s1: Stage<T>,
    s2: Stage<T>,
    sft2: Option<Sft<T>>,
    s3: Stage<T>,
    sft1: Option<Sft<T>>,
    s4: Stage<T>,
    sft0: Option<Sft<T>>,
    out_cols: Vec<T>,
}

fn embed<T: Real>(pre: &mut FMap<T>, emb: &[T], c_noise: T) {
    let hw = pre.plane();
    for (c, &e) in emb.iter().enumerate() {
        pre.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += e * c_noise);
    }
}

fn stage<T: Real>(conv: Conv, x: &FMap<T>, w: &[&[T]], slot: usize, c_noise: T) -> Stage<T> {
    let (mut pre, cols) = conv.forward(x, w[slot], w[slot + 1]);
    embed(&mut pre, w[slot + 2], c_noise);
    Stage { cols, pre }
}

/// Backward through conv + embedding; writes gradients for the three slots.
fn stage_backward<T: Real>(
    conv: Conv,
    st: &Stage<T>,
    w: &[&[T]],
    slot: usize,
    grad_pre: &FMap<T>,
    c_noise: T,
    grads: &mut [Vec<T>],
) -> FMap<T> {
    let (gw, gb, gx) = conv.backward(&st.cols, w[slot], grad_pre, true);
    grads[slot + 2] = gb.iter().map(|&g| g * c_noise).collect();
    grads[slot] = gw;
    grads[slot + 1] = gb;
    gx.expect("input gradient requested")
}

fn sft_forward<T: Real>(feat: FMap<T>, cond: &FMap<T>, w: &[&[T]], k: usize, scale: T) -> (FMap<T>, Sft<T>) {
    let conv = sft_conv(k);
    let s = sft_slot(k);
    let (g, _) = conv.forward(cond, w[s], w[s + 1]);
    let (b, _) = conv.forward(cond, w[s + 2], w[s + 3]);
    let gamma: Vec<T> = g.data.iter().map(|&v| T::one() + scale * v).collect();
    let data = feat
        .data
        .iter()
        .zip(&gamma)
        .zip(&b.data)
        .map(|((&f, &gm), &bt)| gm * f + scale * bt)
        .collect();
    let out = FMap { c: feat.c, h: feat.h, w: feat.w, data };
    (out, Sft { feat, gamma })
}

fn sft_backward<T: Real>(
    sft: &Sft<T>,
    cond: &FMap<T>,
    w: &[&[T]],
    k: usize,
    scale: T,
    grad: &FMap<T>,
    grads: &mut [Vec<T>],
) -> FMap<T> {
    let conv = sft_conv(k);
    let s = sft_slot(k);
    let g_gamma = FMap {
        c: grad.c,
        h: grad.h,
        w: grad.w,
        data: grad.data.iter().zip(&sft.feat.data).map(|(&g, &f)| scale * g * f).collect(),
    };
    let g_beta = FMap { c: grad.c, h: grad.h, w: grad.w, data: grad.data.iter().map(|&g| scale * g).collect() };
    let (gw, gb, _) = conv.backward(&cond.data, w[s], &g_gamma, false);
    grads[s] = gw;
    grads[s + 1] = gb;
    let (gw, gb, _) = conv.backward(&cond.data, w[s + 2], &g_beta, false);
    grads[s + 2] = gw;
    grads[s + 3] = gb;
    FMap {
        c: grad.c,
        h: grad.h,
        w: grad.w,
        data: grad.data.iter().zip(&sft.gamma).map(|(&g, &gm)| g * gm).collect(),
    }
}

impl TinyDenoiser {
    pub fn new(seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 0x7157);
        let mut params = Params::new();
        let mut conv_params = |params: &mut Params, name: &str, conv: Conv, gain: f64, embed: bool| {
            let fan_in = (conv.cin * conv.k * conv.k) as f64;
            let std = (gain / fan_in).sqrt();
            let w = Tensor::from_fn(&[conv.cout, conv.cin, conv.k, conv.k], |_| (std * rng.standard_normal()) as f32)
                .expect("non-empty");
            params.push(format!("{name}.weight"), w);
            params.push(format!("{name}.bias"), Tensor::zeros(&[conv.cout]).expect("non-empty"));
            if embed {
                let e = Tensor::from_fn(&[conv.cout], |_| (0.5 * rng.standard_normal()) as f32).expect("non-empty");
                params.push(format!("{name}.noise_embed"), e);
            }
        };
        conv_params(&mut params, "enc0", conv_in(), 2.0, true);
        conv_params(&mut params, "enc1", conv_e1(), 2.0, true);
        conv_params(&mut params, "enc2", conv_e2(), 2.0, true);
        conv_params(&mut params, "dec1", conv_d1(), 2.0, true);
        conv_params(&mut params, "dec0", conv_d0(), 2.0, true);
        conv_params(&mut params, "out", conv_out(), 0.1, false);
        for k in [2, 1, 0] {
            let conv = sft_conv(k);
            for part in ["gamma", "beta"] {
                let w = Tensor::from_fn(&[conv.cout, conv.cin], |_| (0.01 * rng.standard_normal()) as f32)
                    .expect("non-empty");
                params.push(format!("sft{k}.{part}.weight"), w);
                params.push(format!("sft{k}.{part}.bias"), Tensor::zeros(&[conv.cout]).expect("non-empty"));
            }
        }
        debug_assert_eq!(params.len(), N_SLOTS);
        Self { params, sigma_data: SIGMA_DATA, cond_scale: 1.0 }
    }

    pub fn from_params(params: Params) -> Result<Self> {
        let reference = Self::new(0);
        if params.len() != N_SLOTS
            || params.iter().zip(reference.params.iter()).any(|((n, t), (rn, rt))| n != rn || t.dims() != rt.dims())
        {
            return Err(Error::Format("checkpoint does not match the tiny denoiser layout".into()));
        }
        Ok(Self { params, sigma_data: SIGMA_DATA, cond_scale: 1.0 })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_params(Params::load(dir)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)
    }

    fn weights_f32(&self) -> Vec<&[f32]> {
        (0..N_SLOTS).map(|i| self.params.slice(i)).collect()
    }

    fn check_input(x: &Tensor, cond: Option<&ConditioningFeatures>) -> Result<(usize, usize)> {
        let d = x.dims();
        if !(d.len() == 3 || d.len() == 4) || d[d.len() - 3] != 3 {
            return shape_err(format!("tiny denoiser expects [3,H,W] or [B,3,H,W], got {d:?}"));
        }
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        if h % 4 != 0 || w % 4 != 0 {
            return shape_err(format!("spatial dims {h}x{w} must be divisible by 4"));
        }
        if let Some(c) = cond {
            if c.hr_dims() != (h, w) {
                return shape_err(format!("conditioning is {:?}, image is {h}x{w}", c.hr_dims()));
            }
        }
        Ok((h, w))
    }

    fn cond_maps<T: Real>(cond: Option<&ConditioningFeatures>) -> Option<Vec<FMap<T>>> {
        cond.map(|c| {
            c.scales
                .iter()
                .map(|s| {
                    let d = s.dims();
                    FMap { c: d[0], h: d[1], w: d[2], data: s.data().iter().map(|&v| T::of(v as f64)).collect() }
                })
                .collect()
        })
    }

    fn forward<T: Real>(
        &self,
        w: &[&[T]],
        x: &[T],
        h: usize,
        wd: usize,
        sigma: f64,
        cond: Option<&[FMap<T>]>,
    ) -> (Vec<T>, Option<Cache<T>>) {
        if sigma == 0.0 {
            return (x.to_vec(), None);
        }
        let pc = Precond::new(sigma, self.sigma_data);
        let cn = T::of(pc.c_noise);
        let scale = T::of(self.cond_scale);
        let xin = FMap { c: 3, h, w: wd, data: x.iter().map(|&v| v * T::of(pc.c_in)).collect() };

        let s0 = stage(conv_in(), &xin, w, IN_W, cn);
        let e0 = silu_map(&s0.pre);
        let s1 = stage(conv_e1(), &avgpool2(&e0), w, E1_W, cn);
        let e1 = silu_map(&s1.pre);
        let s2 = stage(conv_e2(), &avgpool2(&e1), w, E2_W, cn);
        let mut m2 = silu_map(&s2.pre);
        let mut sft2 = None;
        if let Some(c) = cond {
            let (m, s) = sft_forward(m2, &c[2], w, 2, scale);
            m2 = m;
            sft2 = Some(s);
        }
        let s3 = stage(conv_d1(), &upsample2(&m2), w, D1_W, cn);
        let mut m1 = silu_map(&s3.pre).add(&e1);
        let mut sft1 = None;
        if let Some(c) = cond {
            let (m, s) = sft_forward(m1, &c[1], w, 1, scale);
            m1 = m;
            sft1 = Some(s);
        }
        let s4 = stage(conv_d0(), &upsample2(&m1), w, D0_W, cn);
        let mut m0 = silu_map(&s4.pre).add(&e0);
        let mut sft0 = None;
        if let Some(c) = cond {
            let (m, s) = sft_forward(m0, &c[0], w, 0, scale);
            m0 = m;
            sft0 = Some(s);
        }
        let (f, out_cols) = conv_out().forward(&m0, w[OUT_W], w[OUT_B]);
        let (cs, co) = (T::of(pc.c_skip), T::of(pc.c_out));
        let d = x.iter().zip(&f.data).map(|(&xv, &fv)| cs * xv + co * fv).collect();
        let cache = Cache { pc, s0, s1, s2, sft2, s3, sft1, s4, sft0, out_cols };
        (d, Some(cache))
    }

    /// Parameter gradients given `dL/dD`.
    fn backward<T: Real>(
        &self,
        w: &[&[T]],
        cache: &Cache<T>,
        cond: Option<&[FMap<T>]>,
        grad_d: &[T],
        h: usize,
        wd: usize,
    ) -> Vec<Vec<T>> {
        let mut grads: Vec<Vec<T>> = w.iter().map(|s| vec![T::zero(); s.len()]).collect();
        let cn = T::of(cache.pc.c_noise);
        let scale = T::of(self.cond_scale);
        let co = T::of(cache.pc.c_out);
        let g_f = FMap { c: 3, h, w: wd, data: grad_d.iter().map(|&g| g * co).collect() };
        let (gw, gb, gm0) = conv_out().backward(&cache.out_cols, w[OUT_W], &g_f, true);
        grads[OUT_W] = gw;
        grads[OUT_B] = gb;
        let mut g_m0 = gm0.expect("input gradient");
        if let (Some(c), Some(s)) = (cond, &cache.sft0) {
            g_m0 = sft_backward(s, &c[0], w, 0, scale, &g_m0, &mut grads);
        }
        // m0 = silu(pre4) + e0
        let mut g_e0 = g_m0.clone();
        let g_pre4 = silu_backward(&cache.s4.pre, &g_m0);
        let g_u0 = stage_backward(conv_d0(), &cache.s4, w, D0_W, &g_pre4, cn, &mut grads);
        let mut g_m1 = upsample2_backward(&g_u0);
        if let (Some(c), Some(s)) = (cond, &cache.sft1) {
            g_m1 = sft_backward(s, &c[1], w, 1, scale, &g_m1, &mut grads);
        }
        let mut g_e1 = g_m1.clone();
        let g_pre3 = silu_backward(&cache.s3.pre, &g_m1);
        let g_u1 = stage_backward(conv_d1(), &cache.s3, w, D1_W, &g_pre3, cn, &mut grads);
        let mut g_m2 = upsample2_backward(&g_u1);
        if let (Some(c), Some(s)) = (cond, &cache.sft2) {
            g_m2 = sft_backward(s, &c[2], w, 2, scale, &g_m2, &mut grads);
        }
        let g_pre2 = silu_backward(&cache.s2.pre, &g_m2);
        let g_p2 = stage_backward(conv_e2(), &cache.s2, w, E2_W, &g_pre2, cn, &mut grads);
        g_e1 = g_e1.add(&avgpool2_backward(&g_p2));
        let g_pre1 = silu_backward(&cache.s1.pre, &g_e1);
        let g_p1 = stage_backward(conv_e1(), &cache.s1, w, E1_W, &g_pre1, cn, &mut grads);
        g_e0 = g_e0.add(&avgpool2_backward(&g_p1));
        let g_pre0 = silu_backward(&cache.s0.pre, &g_e0);
        let (gw, gb, _) = conv_in().backward(&cache.s0.cols, w[IN_W], &g_pre0, false);
        grads[IN_E] = gb.iter().map(|&g| g * cn).collect();
        grads[IN_W] = gw;
        grads[IN_B] = gb;
        grads
    }

    fn image_rows(x: &Tensor) -> usize {
        if x.dims().len() == 4 {
            x.dims()[0]
        } else {
            1
        }
    }

    /// Finite-difference check of the hand-written backward pass in `f64`:
    /// `per_layer` random parameters from each layer type.
    pub fn gradient_check(
        &self,
        x: &Tensor,
        sigma: f64,
        cond: Option<&ConditioningFeatures>,
        target: &Tensor,
        per_layer: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<GradCheck>> {
        let (h, wd) = Self::check_input(x, cond)?;
        x.same_shape(target)?;
        if sigma <= 0.0 {
            return Err(Error::Parameter("gradient check needs sigma > 0".into()));
        }
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let t64: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
        let cond64 = Self::cond_maps::<f64>(cond);
        let eval = |p: &[Vec<f64>]| {
            let w: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
            let (d, cache) = self.forward(&w, &x64, h, wd, sigma, cond64.as_deref());
            let n = d.len() as f64;
            let loss = d.iter().zip(&t64).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
            let g: Vec<f64> = d.iter().zip(&t64).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let grads = self.backward(&w, cache.as_ref().expect("sigma > 0"), cond64.as_deref(), &g, h, wd);
            (loss, grads)
        };
        let mut groups: Vec<(&str, Vec<usize>)> = vec![
            ("conv3x3.weight", vec![IN_W, E1_W, E2_W, D1_W, D0_W, OUT_W]),
            ("conv.bias", vec![IN_B, E1_B, E2_B, D1_B, D0_B, OUT_B]),
            ("noise_embedding", vec![IN_E, E1_E, E2_E, D1_E, D0_E]),
        ];
        if cond.is_some() {
            groups.push(("sft1x1.weight", (0..3).flat_map(|k| [sft_slot(k), sft_slot(k) + 2]).collect()));
            groups.push(("sft1x1.bias", (0..3).flat_map(|k| [sft_slot(k) + 1, sft_slot(k) + 3]).collect()));
        }
        let p64: Vec<Vec<f64>> =
            (0..N_SLOTS).map(|i| self.params.slice(i).iter().map(|&v| v as f64).collect()).collect();
        Ok(finite_difference_check(&p64, &groups, per_layer, rng, eval))
    }
}

impl Denoiser for TinyDenoiser {
    fn denoise_rows(&self, x: &Tensor, sigmas: &[f64], cond: Option<&ConditioningFeatures>) -> Result<Tensor> {
        let (h, wd) = Self::check_input(x, cond)?;
        let rows = Self::image_rows(x);
        let per_row = if x.dims().len() == 4 {
            let _ = row_sigmas(x, sigmas)?;
            sigmas.len() > 1
        } else {
            if sigmas.len() != 1 {
                return shape_err("single image takes one sigma");
            }
            false
        };
        let w = self.weights_f32();
        let cond32 = Self::cond_maps::<f32>(cond);
        let n = 3 * h * wd;
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let sigma = if per_row { sigmas[r] } else { sigmas[0] };
            if sigma < 0.0 {
                return Err(Error::Parameter(format!("negative sigma {sigma}")));
            }
            let (d, _) = self.forward(&w, &x.data()[r * n..(r + 1) * n], h, wd, sigma, cond32.as_deref());
            out.extend(d);
        }
        let t = Tensor::new(x.dims().to_vec(), out)?;
        t.ensure_finite("tiny denoiser output")?;
        Ok(t)
    }
}

impl Trainable for TinyDenoiser {
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
        cond: Option<&ConditioningFeatures>,
        loss: &mut dyn FnMut(&Tensor) -> Result<(f64, Tensor)>,
    ) -> Result<(f64, Params)> {
        let (h, wd) = Self::check_input(x, cond)?;
        let rows = Self::image_rows(x);
        if sigmas.len() != 1 && sigmas.len() != rows {
            return shape_err(format!("{} sigmas for {rows} images", sigmas.len()));
        }
        let w = self.weights_f32();
        let cond32 = Self::cond_maps::<f32>(cond);
        let n = 3 * h * wd;
        let mut caches = Vec::with_capacity(rows);
        let mut d_all = Vec::with_capacity(x.len());
        for r in 0..rows {
            let sigma = sigmas[if sigmas.len() == 1 { 0 } else { r }];
            let (d, cache) = self.forward(&w, &x.data()[r * n..(r + 1) * n], h, wd, sigma, cond32.as_deref());
            d_all.extend(d);
            caches.push(cache);
        }
        let d = Tensor::new(x.dims().to_vec(), d_all)?;
        let (value, grad_d) = loss(&d)?;
        d.same_shape(&grad_d)?;
        let mut total = self.params.zeros_like();
        for (r, cache) in caches.iter().enumerate() {
            // σ = 0 rows are the identity and carry no parameter gradient.
            let Some(cache) = cache else { continue };
            let g = self.backward(&w, cache, cond32.as_deref(), &grad_d.data()[r * n..(r + 1) * n], h, wd);
            for (i, gi) in g.into_iter().enumerate() {
                for (dst, v) in total.get_mut(i).data_mut().iter_mut().zip(gi) {
                    *dst += v;
                }
            }
        }
        Ok((value, total))
    }
}
