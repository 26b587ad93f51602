//! Layer kernels with hand-derived backward passes.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real: Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Default + Debug + Send + Sync + 'static {
    /// `C = A·B (+ C if accumulate)` with A `m×k`, B `k×n`, C `m×n`, all
    /// row-major; `ta`/`tb` read A/B as stored transposed.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self], accumulate: bool);

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical element (i, j) of a rows×cols operand
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $f(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Feature map `[c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FMap<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> FMap<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn add(&self, other: &FMap<T>) -> FMap<T> {
        debug_assert_eq!(self.data.len(), other.data.len());
        FMap {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

fn im2col<T: Real>(x: &FMap<T>, k: usize) -> Vec<T> {
    if k == 1 {
        return x.data.clone();
    }
    let (h, w) = (x.h, x.w);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); x.c * k * k * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = src[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> FMap<T> {
    if k == 1 {
        return FMap { c, h, w, data: cols.to_vec() };
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = FMap::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            dst[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Geometry of a same-padded `k×k` convolution (`k` odd).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    /// Returns the output and the im2col buffer needed by [`Conv::backward`].
    pub fn forward<T: Real>(&self, x: &FMap<T>, weight: &[T], bias: &[T]) -> (FMap<T>, Vec<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let cols = im2col(x, self.k);
        let mut out = FMap::zeros(self.cout, x.h, x.w);
        for (co, b) in bias.iter().enumerate() {
            out.data[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        T::gemm(self.cout, self.cin * self.k * self.k, hw, weight, false, &cols, false, &mut out.data, true);
        (out, cols)
    }

    /// Gradients w.r.t. weight, bias and (optionally) input.
    pub fn backward<T: Real>(
        &self,
        cols: &[T],
        weight: &[T],
        grad_out: &FMap<T>,
        want_input: bool,
    ) -> (Vec<T>, Vec<T>, Option<FMap<T>>) {
        let hw = grad_out.plane();
        let kk = self.cin * self.k * self.k;
        let mut gw = vec![T::zero(); self.weight_len()];
        T::gemm(self.cout, hw, kk, &grad_out.data, false, cols, true, &mut gw, false);
        let gb = (0..self.cout)
            .map(|co| grad_out.data[co * hw..(co + 1) * hw].iter().copied().sum())
            .collect();
        let gx = want_input.then(|| {
            let mut gcols = vec![T::zero(); kk * hw];
            T::gemm(kk, self.cout, hw, weight, true, &grad_out.data, false, &mut gcols, false);
            col2im(&gcols, self.cin, grad_out.h, grad_out.w, self.k)
        });
        (gw, gb, gx)
    }
}

pub fn silu<T: Real>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

pub fn silu_grad<T: Real>(v: T) -> T {
    let s = T::one() / (T::one() + (-v).exp());
    s * (T::one() + v * (T::one() - s))
}

pub fn silu_map<T: Real>(x: &FMap<T>) -> FMap<T> {
    FMap { c: x.c, h: x.h, w: x.w, data: x.data.iter().map(|&v| silu(v)).collect() }
}

/// Chain rule through SiLU given the pre-activation.
pub fn silu_backward<T: Real>(pre: &FMap<T>, grad: &FMap<T>) -> FMap<T> {
    FMap {
        c: pre.c,
        h: pre.h,
        w: pre.w,
        data: pre.data.iter().zip(&grad.data).map(|(&p, &g)| g * silu_grad(p)).collect(),
    }
}

/// 2×2 mean pooling.
pub fn avgpool2<T: Real>(x: &FMap<T>) -> FMap<T> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let q = T::of(0.25);
    let mut out = FMap::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * x.w + 2 * xx;
                out.data[c * oh * ow + y * ow + xx] = q * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Real>(grad: &FMap<T>) -> FMap<T> {
    let (h, w) = (grad.h * 2, grad.w * 2);
    let q = T::of(0.25);
    let mut out = FMap::zeros(grad.c, h, w);
    for c in 0..grad.c {
        for y in 0..h {
            for x in 0..w {
                out.data[c * h * w + y * w + x] = q * grad.data[c * grad.plane() + (y / 2) * grad.w + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &FMap<T>) -> FMap<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = FMap::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] = x.data[c * x.plane() + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad: &FMap<T>) -> FMap<T> {
    let (oh, ow) = (grad.h / 2, grad.w / 2);
    let mut out = FMap::zeros(grad.c, oh, ow);
    for c in 0..grad.c {
        for y in 0..grad.h {
            for x in 0..grad.w {
                out.data[c * oh * ow + (y / 2) * ow + x / 2] += grad.data[c * grad.plane() + y * grad.w + x];
            }
        }
    }
    out
}

/// Dense layer on a batch of rows: `y = x·Wᵀ + b`, `W` is `out×in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, x: &[T], rows: usize, weight: &[T], bias: &[T]) -> Vec<T> {
        let mut y = Vec::with_capacity(rows * self.fan_out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        T::gemm(rows, self.fan_in, self.fan_out, x, false, weight, true, &mut y, true);
        y
    }

    /// Returns `(grad_weight, grad_bias, grad_input)`.
    pub fn backward<T: Real>(&self, x: &[T], rows: usize, weight: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut gw = vec![T::zero(); self.fan_out * self.fan_in];
        T::gemm(self.fan_out, rows, self.fan_in, grad, true, x, false, &mut gw, false);
        let mut gb = vec![T::zero(); self.fan_out];
        for r in 0..rows {
            for (o, g) in gb.iter_mut().enumerate() {
                *g += grad[r * self.fan_out + o];
            }
        }
        let mut gx = vec![T::zero(); rows * self.fan_in];
        T::gemm(rows, self.fan_out, self.fan_in, grad, false, weight, false, &mut gx, false);
        (gw, gb, gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.standard_normal()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(conv: &Conv, x: &FMap<f64>, w: &[f64], b: &[f64]) -> Vec<f64> {
        let k = conv.k as isize;
        let pad = k / 2;
        let mut out = vec![0.0; conv.cout * x.h * x.w];
        for co in 0..conv.cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = b[co];
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy >= 0 && sy < x.h as isize && sx >= 0 && sx < x.w as isize {
                                    let wi = ((co * conv.cin + ci) * conv.k + ky as usize) * conv.k + kx as usize;
                                    acc += w[wi] * x.data[ci * x.plane() + sy as usize * x.w + sx as usize];
                                }
                            }
                        }
                    }
                    out[co * x.h * x.w + y as usize * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = RngStream::new(1, 0);
        for k in [1, 3] {
            let conv = Conv { cin: 3, cout: 4, k };
            let x = FMap { c: 3, h: 5, w: 6, data: rand_vec(&mut rng, 90) };
            let w = rand_vec(&mut rng, conv.weight_len());
            let b = rand_vec(&mut rng, 4);
            let (y, _) = conv.forward(&x, &w, &b);
            for (a, o) in y.data.iter().zip(conv_oracle(&conv, &x, &w, &b)) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }

    /// Adjoint identity <grad, J·v> == <Jᵀ·grad, v> checked via finite differences.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = RngStream::new(2, 0);
        let conv = Conv { cin: 2, cout: 3, k: 3 };
        let x = FMap { c: 2, h: 4, w: 5, data: rand_vec(&mut rng, 40) };
        let w = rand_vec(&mut rng, conv.weight_len());
        let b = rand_vec(&mut rng, 3);
        let g = FMap { c: 3, h: 4, w: 5, data: rand_vec(&mut rng, 60) };
        let (_, cols) = conv.forward(&x, &w, &b);
        let (gw, gb, gx) = conv.backward(&cols, &w, &g, true);
        let gx = gx.unwrap();
        let loss = |x: &FMap<f64>, w: &[f64], b: &[f64]| dot(&conv.forward(x, w, b).0.data, &g.data);
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = RngStream::new(3, 0);
        let x = FMap { c: 2, h: 4, w: 6, data: rand_vec(&mut rng, 48) };
        let g = FMap { c: 2, h: 2, w: 3, data: rand_vec(&mut rng, 12) };
        // <pool(x), g> == <x, poolᵀ(g)>
        assert!((dot(&avgpool2(&x).data, &g.data) - dot(&x.data, &avgpool2_backward(&g).data)).abs() < 1e-12);
        // <up(g), x> == <g, upᵀ(x)>
        assert!((dot(&upsample2(&g).data, &x.data) - dot(&g.data, &upsample2_backward(&x).data)).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative() {
        for &v in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(v + 1e-6) - silu(v - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(v)).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = RngStream::new(4, 0);
        let lin = Linear { fan_in: 3, fan_out: 4 };
        let rows = 5;
        let x = rand_vec(&mut rng, rows * 3);
        let w = rand_vec(&mut rng, 12);
        let b = rand_vec(&mut rng, 4);
        let g = rand_vec(&mut rng, rows * 4);
        let (gw, gb, gx) = lin.backward(&x, rows, &w, &g);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&lin.forward(x, rows, w, b), &g);
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for i in 0..12 {
            let d = fd(&|e| {
                let mut w2 = w.clone();
                w2[i] += e;
                loss(&x, &w2, &b)
            });
            assert!((d - gw[i]).abs() < 1e-6);
        }
        for i in 0..4 {
            let d = fd(&|e| {
                let mut b2 = b.clone();
                b2[i] += e;
                loss(&x, &w, &b2)
            });
            assert!((d - gb[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let d = fd(&|e| {
                let mut x2 = x.clone();
                x2[i] += e;
                loss(&x2, &w, &b)
            });
            assert!((d - gx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn f32_and_f64_gemm_agree() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect();
        let mut c32 = vec![0f32; 8];
        f32::gemm(2, 3, 4, &a, false, &b, false, &mut c32, false);
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let mut c64 = vec![0f64; 8];
        f64::gemm(2, 3, 4, &a64, false, &b64, false, &mut c64, false);
        for (x, y) in c32.iter().zip(&c64) {
            assert_eq!(*x as f64, *y);
        }
        // transposed A
        let at: Vec<f64> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0];
        let mut ct = vec![0f64; 8];
        f64::gemm(2, 3, 4, &at, true, &b64, false, &mut ct, false);
        assert_eq!(ct, c64);
    }
}
