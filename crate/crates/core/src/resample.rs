//! Image resampling on `[C,H,W]` tensors.

use crate::error::{param_err, shape_err, Result};
use crate::tensor::Tensor;

/// Catmull-Rom cubic (a = -0.5).
pub(crate) fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index source taps `(index, weight)` along one axis.
fn cubic_taps(src_len: usize, dst_len: usize, scale: f64) -> Vec<[(usize, f64); 4]> {
    (0..dst_len)
        .map(|o| {
            let s = (o as f64 + 0.5) / scale - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let off = k as f64 - 1.0;
                let idx = (base + off).clamp(0.0, (src_len - 1) as f64) as usize;
                *tap = (idx, cubic_weight(frac - off));
            }
            taps
        })
        .collect()
}

/// Separable Catmull-Rom resize with half-pixel centres and clamped edges.
///
/// Output size is `round(H·scale) × round(W·scale)`; `scale == 1` returns
/// the input unchanged.
pub fn resize_bicubic(img: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return param_err(format!("scale must be positive, got {scale}"));
    }
    let (c, h, w) = img.chw()?;
    if h < 4 || w < 4 {
        return shape_err(format!("resize needs H,W >= 4, got {h}x{w}"));
    }
    if scale == 1.0 {
        return Ok(img.clone());
    }
    let oh = ((h as f64) * scale).round().max(1.0) as usize;
    let ow = ((w as f64) * scale).round().max(1.0) as usize;
    let ty = cubic_taps(h, oh, scale);
    let tx = cubic_taps(w, ow, scale);
    let src = img.data();
    let mut out = vec![0f32; c * oh * ow];
    let mut rows = vec![0f64; h * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, taps) in tx.iter().enumerate() {
                rows[y * ow + x] = taps.iter().map(|&(i, wt)| row[i] as f64 * wt).sum();
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                let v: f64 = taps.iter().map(|&(i, wt)| rows[i * ow + x] * wt).sum();
                dst[y * ow + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Bilinear sample of one plane at `(y, x)` with clamped edges.
pub(crate) fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Moves image content by `(dx, dy)` pixels and rotates it by `theta_deg`
/// (counter-clockwise in image coordinates) about the image centre.
///
/// Each output pixel is the bilinear sample of the inverse-mapped position,
/// with out-of-range coordinates clamped to the border.
pub fn warp_affine(img: &Tensor, dx: f64, dy: f64, theta_deg: f64) -> Result<Tensor> {
    if !(theta_deg.abs() < 90.0) {
        return param_err(format!("|theta| must be < 90 degrees, got {theta_deg}"));
    }
    let (c, h, w) = img.chw()?;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, co) = theta_deg.to_radians().sin_cos();
    let src = img.data();
    let mut out = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse: p_src = R(-theta) (p - c - d) + c
            let px = x as f64 - cx - dx;
            let py = y as f64 - cy - dy;
            let sx = co * px + s * py + cx;
            let sy = -s * px + co * py + cy;
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                out[ch * h * w + y * w + x] = bilinear(plane, h, w, sy, sx) as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn box_downsample(img: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err(format!("{h}x{w} not divisible by {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = img.data();
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f64;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        acc += src[ch * h * w + y * w + x] as f64;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = (acc * norm) as f32;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct 4×4-neighbourhood evaluation, independent of the separable path.
    fn bicubic_oracle(img: &Tensor, scale: f64) -> Vec<f64> {
        let (c, h, w) = img.chw().unwrap();
        let oh = (h as f64 * scale).round() as usize;
        let ow = (w as f64 * scale).round() as usize;
        let kern = |t: f64| {
            let a = -0.5;
            let t = t.abs();
            if t <= 1.0 {
                (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
            } else if t < 2.0 {
                a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
            } else {
                0.0
            }
        };
        let mut out = Vec::new();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = (oy as f64 + 0.5) / scale - 0.5;
                    let sx = (ox as f64 + 0.5) / scale - 0.5;
                    let mut acc = 0.0;
                    for iy in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                        for ix in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                            let cy = iy.clamp(0, h as i64 - 1) as usize;
                            let cx = ix.clamp(0, w as i64 - 1) as usize;
                            let v = img.data()[ch * h * w + cy * w + cx] as f64;
                            acc += v * kern(sy - iy as f64) * kern(sx - ix as f64);
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn constant_survives_upscale() {
        let img = Tensor::full(&[3, 6, 5], 0.3).unwrap();
        let up = resize_bicubic(&img, 2.0).unwrap();
        assert_eq!(up.dims(), &[3, 12, 10]);
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn unit_scale_is_bit_identical() {
        let img = Tensor::from_fn(&[2, 5, 7], |i| (i as f32 * 0.37).sin()).unwrap();
        assert_eq!(resize_bicubic(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn ramp_matches_direct_oracle() {
        let img = Tensor::from_fn(&[1, 8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            0.05 * x as f32 + 0.02 * y as f32
        })
        .unwrap();
        let up = resize_bicubic(&img, 2.0).unwrap();
        let oracle = bicubic_oracle(&img, 2.0);
        assert_eq!(up.len(), oracle.len());
        for (a, b) in up.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn bad_scale_and_small_images_rejected() {
        let img = Tensor::zeros(&[1, 8, 8]).unwrap();
        assert!(resize_bicubic(&img, 0.0).is_err());
        assert!(resize_bicubic(&img, -1.0).is_err());
        assert!(resize_bicubic(&Tensor::zeros(&[1, 3, 8]).unwrap(), 2.0).is_err());
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let img = Tensor::from_fn(&[2, 10, 12], |i| ((i * 31) % 17) as f32 / 17.0).unwrap();
        let same = warp_affine(&img, 0.0, 0.0, 0.0).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let shifted = warp_affine(&img, 3.0, 0.0, 0.0).unwrap();
        for ch in 0..2 {
            for y in 0..10 {
                for x in 3..12 {
                    let o = shifted.data()[ch * 120 + y * 12 + x];
                    let i = img.data()[ch * 120 + y * 12 + x - 3];
                    assert_eq!(o, i);
                }
            }
        }
    }

    #[test]
    fn half_pixel_shift_of_ramp() {
        let img = Tensor::from_fn(&[1, 6, 16], |i| 0.1 * (i % 16) as f32).unwrap();
        let out = warp_affine(&img, 0.5, 0.0, 0.0).unwrap();
        for y in 0..6 {
            for x in 1..16 {
                let expect = 0.1 * (x as f32 - 0.5);
                assert!((out.data()[y * 16 + x] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rotation_limit() {
        let img = Tensor::zeros(&[1, 8, 8]).unwrap();
        assert!(warp_affine(&img, 0.0, 0.0, 90.0).is_err());
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f32).unwrap();
        let d = box_downsample(&img, 2).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(box_downsample(&img, 3).is_err());
    }

    fn smooth_image(seed: u64, h: usize, w: usize) -> Tensor {
        let a = (seed % 7) as f64 * 0.1 + 0.2;
        let b = (seed % 5) as f64 * 0.1 + 0.1;
        Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (0.5 + 0.3 * (a * x * 0.4).sin() * (b * y * 0.5).cos()) as f32
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn up_then_down_recovers_smooth_images(seed in 0u64..200, scale in prop::sample::select(vec![2.0f64, 4.0])) {
            let img = smooth_image(seed, 16, 16);
            let up = resize_bicubic(&img, scale).unwrap();
            let back = resize_bicubic(&up, 1.0 / scale).unwrap();
            let rms = (img.sub(&back).unwrap().sq_norm() / img.len() as f64).sqrt();
            prop_assert!(rms < 1e-2, "rms {}", rms);
        }

        #[test]
        fn integer_translation_round_trip(dx in -3i32..=3, dy in -3i32..=3, seed in 0u64..100) {
            let img = Tensor::from_fn(&[1, 24, 24], |i| ((i as u64 * 2654435761 + seed) % 97) as f32 / 97.0).unwrap();
            let fwd = warp_affine(&img, dx as f64, dy as f64, 0.0).unwrap();
            let back = warp_affine(&fwd, -dx as f64, -dy as f64, 0.0).unwrap();
            for y in 6..18 {
                for x in 6..18 {
                    prop_assert!((img.data()[y * 24 + x] - back.data()[y * 24 + x]).abs() < 1e-4);
                }
            }
        }

        #[test]
        fn fractional_translation_round_trip_on_affine_images(
            dx in -3.0f64..3.0, dy in -3.0f64..3.0, gx in -0.02f64..0.02, gy in -0.02f64..0.02,
        ) {
            // bilinear reproduces affine signals exactly, so the interior must come back
            let img = Tensor::from_fn(&[1, 24, 24], |i| {
                (0.5 + gx * (i % 24) as f64 + gy * (i / 24) as f64) as f32
            }).unwrap();
            let fwd = warp_affine(&img, dx, dy, 0.0).unwrap();
            let back = warp_affine(&fwd, -dx, -dy, 0.0).unwrap();
            for y in 7..17 {
                for x in 7..17 {
                    prop_assert!((img.data()[y * 24 + x] - back.data()[y * 24 + x]).abs() < 1e-4);
                }
            }
        }
    }
}
