//! Deterministic burst SR used as the diffusion initialiser: phase
//! correlation alignment, bilinear demosaic, confidence-weighted fusion and
//! bicubic upsampling.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::burst::BurstStack;
use crate::error::{shape_err, Result};
use crate::resample::{bilinear, resize_bicubic, warp_affine};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameShift {
    /// Translation of the frame relative to the reference, in RAW-plane pixels.
    pub dx: f64,
    pub dy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentEstimate {
    pub shifts: Vec<FrameShift>,
}

/// Mean of the two green planes.
fn green_plane(frame: &Tensor) -> (Vec<f64>, usize, usize) {
    let d = frame.dims();
    let (h, w) = (d[1], d[2]);
    let n = h * w;
    let g = (0..n)
        .map(|i| 0.5 * (frame.data()[n + i] as f64 + frame.data()[2 * n + i] as f64))
        .collect();
    (g, h, w)
}

fn zero_mean(v: &[f64]) -> (Vec<f64>, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - m).collect();
    let energy = c.iter().map(|x| x * x).sum();
    (c, energy)
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

/// Vertex offset of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`.
fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Pearson correlation of two equally sized signals; 0 when either is flat.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ac, ea) = zero_mean(a);
    let (bc, eb) = zero_mean(b);
    if ea < 1e-12 || eb < 1e-12 {
        return 0.0;
    }
    ac.iter().zip(&bc).map(|(x, y)| x * y).sum::<f64>() / (ea * eb).sqrt()
}

/// Shift of `moving` relative to `reference` (so that `moving(p) ≈ reference(p - shift)`).
fn phase_correlate(reference: &[f64], moving: &[f64], h: usize, w: usize) -> Option<(f64, f64)> {
    let (r, er) = zero_mean(reference);
    let (m, em) = zero_mean(moving);
    if er < 1e-12 || em < 1e-12 {
        return None;
    }
    let mut fr: Vec<Complex<f64>> = r.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut fm: Vec<Complex<f64>> = m.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut fr, h, w, false);
    fft2(&mut fm, h, w, false);
    let mut cross: Vec<Complex<f64>> = fm
        .iter()
        .zip(&fr)
        .map(|(a, b)| {
            let p = a * b.conj();
            let mag = p.norm();
            if mag > 1e-12 {
                p / mag
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    fft2(&mut cross, h, w, true);
    let surface: Vec<f64> = cross.iter().map(|c| c.re).collect();
    let (peak, _) = surface
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let (py, px) = (peak / w, peak % w);
    let at = |y: isize, x: isize| {
        let yy = y.rem_euclid(h as isize) as usize;
        let xx = x.rem_euclid(w as isize) as usize;
        surface[yy * w + xx]
    };
    let (iy, ix) = (py as isize, px as isize);
    let sub_x = if w >= 3 {
        parabolic_offset(at(iy, ix - 1), at(iy, ix), at(iy, ix + 1))
    } else {
        0.0
    };
    let sub_y = if h >= 3 {
        parabolic_offset(at(iy - 1, ix), at(iy, ix), at(iy + 1, ix))
    } else {
        0.0
    };
    let wrap = |p: usize, n: usize| if p > n / 2 { p as f64 - n as f64 } else { p as f64 };
    Some((wrap(px, w) + sub_x, wrap(py, h) + sub_y))
}

fn sample(v: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
    let bot = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Mean squared difference between `reference(p)` and `moving(p + d)` over
/// pixels where `p + d` lies inside the frame.
fn overlap_cost(reference: &[f64], moving: &[f64], h: usize, w: usize, dx: f64, dy: f64) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as f64 + dy, x as f64 + dx);
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            sum += (sample(moving, h, w, sy, sx) - reference[y * w + x]).powi(2);
            n += 1;
        }
    }
    (n * 4 >= h * w).then(|| sum / n as f64)
}

/// Picks the best integer shift around the phase-correlation peak or around
/// zero motion, then
/// refines it with Gauss-Newton (Lucas-Kanade) steps on the overlap.
fn refine_shift(reference: &[f64], moving: &[f64], h: usize, w: usize, start: (f64, f64)) -> (f64, f64) {
    let (cx, cy) = (start.0.round(), start.1.round());
    let mut best = (start, overlap_cost(reference, moving, h, w, start.0, start.1).unwrap_or(f64::MAX));
    for (bx, by) in [(cx, cy), (0.0, 0.0)] {
        for (ox, oy) in (-1..=1).flat_map(|oy| (-1..=1).map(move |ox| (ox, oy))) {
            let d = (bx + ox as f64, by + oy as f64);
            if let Some(c) = overlap_cost(reference, moving, h, w, d.0, d.1) {
                if c < best.1 {
                    best = (d, c);
                }
            }
        }
    }
    let (mut dx, mut dy) = best.0;
    for _ in 0..30 {
        let (mut hxx, mut hxy, mut hyy, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as f64 + dy, x as f64 + dx);
                if sy < 0.5 || sx < 0.5 || sy > h as f64 - 1.5 || sx > w as f64 - 1.5 {
                    continue;
                }
                let gx = sample(moving, h, w, sy, sx + 0.5) - sample(moving, h, w, sy, sx - 0.5);
                let gy = sample(moving, h, w, sy + 0.5, sx) - sample(moving, h, w, sy - 0.5, sx);
                let r = sample(moving, h, w, sy, sx) - reference[y * w + x];
                hxx += gx * gx;
                hxy += gx * gy;
                hyy += gy * gy;
                bx += gx * r;
                by += gy * r;
            }
        }
        let det = hxx * hyy - hxy * hxy;
        if det.abs() < 1e-12 {
            break;
        }
        let ux = (-(hyy * bx - hxy * by) / det).clamp(-0.5, 0.5);
        let uy = (-(hxx * by - hxy * bx) / det).clamp(-0.5, 0.5);
        dx += ux;
        dy += uy;
        if ux.abs() + uy.abs() < 1e-5 {
            break;
        }
    }
    if overlap_cost(reference, moving, h, w, dx, dy).map_or(true, |c| c > best.1) {
        return best.0;
    }
    (dx, dy)
}

/// Per-frame translation of the green planes: phase correlation for the
/// coarse estimate, then integer and Lucas-Kanade refinement on the overlap.
/// Rotation is ignored.
///
/// Confidence is the correlation between the reference and the frame after
/// undoing the estimated shift, floored at zero. The reference frame gets
/// `(0, 0)` with confidence 1; a flat frame gets `(0, 0)` with confidence 0.
pub fn estimate_shifts(stack: &BurstStack) -> Result<AlignmentEstimate> {
    if stack.len() < 2 {
        return shape_err("alignment needs at least two frames");
    }
    let (reference, h, w) = green_plane(stack.reference());
    let shifts = stack
        .frames
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            if k == stack.reference_index {
                return Ok(FrameShift { dx: 0.0, dy: 0.0, confidence: 1.0 });
            }
            let (g, _, _) = green_plane(frame);
            let Some(coarse) = phase_correlate(&reference, &g, h, w) else {
                return Ok(FrameShift { dx: 0.0, dy: 0.0, confidence: 0.0 });
            };
            let (dx, dy) = refine_shift(&reference, &g, h, w, coarse);
            let moving = Tensor::new(vec![1, h, w], g.iter().map(|&v| v as f32).collect())?;
            let undone = warp_affine(&moving, -dx, -dy, 0.0)?;
            let undone: Vec<f64> = undone.data().iter().map(|&v| v as f64).collect();
            let confidence = pearson(&reference, &undone).max(0.0);
            Ok(FrameShift { dx, dy, confidence })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentEstimate { shifts })
}

/// Bilinear demosaic of `[4,h,w]` RGGB planes to `[3,2h,2w]` RGB.
pub fn demosaic_bilinear(raw: &Tensor) -> Result<Tensor> {
    let (c, h, w) = raw.chw()?;
    if c != 4 {
        return shape_err(format!("demosaic needs 4 planes, got {c}"));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let n = h * w;
    let plane = |p: usize| &raw.data()[p * n..(p + 1) * n];
    let mut out = vec![0f32; 3 * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (fy, fx) = (y as f64 / 2.0, x as f64 / 2.0);
            let (gy, gx) = ((y as f64 - 1.0) / 2.0, (x as f64 - 1.0) / 2.0);
            let r = bilinear(plane(0), h, w, fy, fx);
            let g = 0.5 * (bilinear(plane(1), h, w, fy, gx) + bilinear(plane(2), h, w, gy, fx));
            let b = bilinear(plane(3), h, w, gy, gx);
            let i = y * ow + x;
            out[i] = r as f32;
            out[oh * ow + i] = g as f32;
            out[2 * oh * ow + i] = b as f32;
        }
    }
    Tensor::new(vec![3, oh, ow], out)
}

/// Sub-pixel offset of each RGGB plane's samples on the `2h × 2w` grid.
const PLANE_SITES: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
const PLANE_CHANNEL: [usize; 4] = [0, 1, 1, 2];
const SPLAT_SIGMA: f64 = 0.6;
const SPLAT_RADIUS: isize = 2;

/// Shift-and-add fusion at RAW resolution (`[3,2h,2w]`): every RAW sample is
/// placed at its aligned sub-pixel position in reference coordinates and
/// splatted with a Gaussian kernel weighted by frame confidence (normalized
/// convolution). Pixels no sample reaches fall back to the demosaiced
/// reference.
pub fn fuse_frames(stack: &BurstStack, align: &AlignmentEstimate) -> Result<Tensor> {
    if align.shifts.len() != stack.len() {
        return shape_err(format!(
            "alignment covers {} frames, burst has {}",
            align.shifts.len(),
            stack.len()
        ));
    }
    if align.shifts.iter().all(|s| s.confidence <= 0.0) {
        return shape_err("no frame carries positive confidence");
    }
    let (_, h, w) = stack.reference().chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut num = vec![0f64; 3 * oh * ow];
    let mut den = vec![0f64; 3 * oh * ow];
    let inv = 1.0 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA);
    for (frame, s) in stack.frames.iter().zip(&align.shifts) {
        if s.confidence <= 0.0 {
            continue;
        }
        let data = frame.data();
        for (p, &(sy, sx)) in PLANE_SITES.iter().enumerate() {
            let c = PLANE_CHANNEL[p];
            for i in 0..h {
                for j in 0..w {
                    let v = data[(p * h + i) * w + j] as f64;
                    // moving(q) ≈ reference(q − shift); one plane pixel is two grid pixels
                    let qy = 2.0 * i as f64 + sy - 2.0 * s.dy;
                    let qx = 2.0 * j as f64 + sx - 2.0 * s.dx;
                    let (cy, cx) = (qy.round() as isize, qx.round() as isize);
                    for y in cy - SPLAT_RADIUS..=cy + SPLAT_RADIUS {
                        if y < 0 || y >= oh as isize {
                            continue;
                        }
                        for x in cx - SPLAT_RADIUS..=cx + SPLAT_RADIUS {
                            if x < 0 || x >= ow as isize {
                                continue;
                            }
                            let d2 = (y as f64 - qy).powi(2) + (x as f64 - qx).powi(2);
                            let k = s.confidence * (-d2 * inv).exp();
                            let o = (c * oh + y as usize) * ow + x as usize;
                            num[o] += k * v;
                            den[o] += k;
                        }
                    }
                }
            }
        }
    }
    let fallback = demosaic_bilinear(stack.reference())?;
    let out = num
        .iter()
        .zip(&den)
        .zip(fallback.data())
        .map(|((&n, &d), &f)| if d > 1e-3 { (n / d) as f32 } else { f })
        .collect();
    Tensor::new(vec![3, oh, ow], out)
}

/// Full deterministic burst SR: fuse at RAW resolution, then bicubic-upsample
/// by `scale_factor` and clamp to `[0, 1]`.
pub fn fuse_and_upsample(stack: &BurstStack, align: &AlignmentEstimate, scale_factor: usize) -> Result<Tensor> {
    let fused = fuse_frames(stack, align)?;
    Ok(resize_bicubic(&fused, scale_factor as f64)?.clamp(0.0, 1.0))
}

/// Estimate shifts and reconstruct in one call.
pub fn baseline_sr(stack: &BurstStack, scale_factor: usize) -> Result<Tensor> {
    let align = estimate_shifts(stack)?;
    fuse_and_upsample(stack, &align, scale_factor)
}

/// Reference-frame-only reconstruction (no fusion).
pub fn single_frame_sr(stack: &BurstStack, scale_factor: usize) -> Result<Tensor> {
    let rgb = demosaic_bilinear(stack.reference())?;
    Ok(resize_bicubic(&rgb, scale_factor as f64)?.clamp(0.0, 1.0))
}
