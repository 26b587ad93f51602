//! Burst encoder: fuses aligned frames into per-pixel mean and spread maps
//! at three resolutions. The learned lifting to SFT modulation lives in the
//! denoiser's 1×1 convolutions.

use crate::baseline::{demosaic_bilinear, AlignmentEstimate};
use crate::burst::BurstStack;
use crate::error::{shape_err, Result};
use crate::resample::{box_downsample, resize_bicubic, warp_affine};
use crate::tensor::Tensor;

/// Channels per scale: weighted mean RGB followed by weighted std RGB.
pub const COND_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningFeatures {
    /// `scales[k]` is `[6, H/2^k, W/2^k]`.
    pub scales: Vec<Tensor>,
}

impl ConditioningFeatures {
    pub fn new(scales: Vec<Tensor>) -> Result<Self> {
        if scales.len() != 3 {
            return shape_err(format!("expected 3 scales, got {}", scales.len()));
        }
        let (c, h, w) = scales[0].chw()?;
        for (k, s) in scales.iter().enumerate() {
            let want = [c, h >> k, w >> k];
            if s.dims() != want || c != COND_CHANNELS {
                return shape_err(format!("scale {k} has dims {:?}, expected {want:?}", s.dims()));
            }
        }
        Ok(Self { scales })
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        let d = self.scales[0].dims();
        (d[1], d[2])
    }
}

/// Aligns and demosaics every frame with positive confidence, then takes the
/// confidence-weighted per-pixel mean and standard deviation. Samples are
/// sorted per pixel before summation so the result does not depend on frame
/// order. Features are upsampled by `scale_factor` to HR and box-pooled to
/// the coarser scales.
pub fn encode_burst(stack: &BurstStack, align: &AlignmentEstimate, scale_factor: usize) -> Result<ConditioningFeatures> {
    if align.shifts.len() != stack.len() {
        return shape_err(format!("alignment covers {} frames, burst has {}", align.shifts.len(), stack.len()));
    }
    let mut rgbs = Vec::new();
    let mut weights = Vec::new();
    for (frame, s) in stack.frames.iter().zip(&align.shifts) {
        if s.confidence <= 0.0 {
            continue;
        }
        let aligned = if s.dx == 0.0 && s.dy == 0.0 {
            frame.clone()
        } else {
            warp_affine(frame, -s.dx, -s.dy, 0.0)?
        };
        rgbs.push(demosaic_bilinear(&aligned)?);
        weights.push(s.confidence);
    }
    if rgbs.is_empty() {
        return shape_err("no frame carries positive confidence");
    }
    let (_, h, w) = rgbs[0].chw()?;
    let n = 3 * h * w;
    let mut feat = vec![0f32; 2 * n];
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(rgbs.len());
    for i in 0..n {
        samples.clear();
        samples.extend(rgbs.iter().zip(&weights).map(|(t, &wt)| (t.data()[i] as f64, wt)));
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let total: f64 = samples.iter().map(|s| s.1).sum();
        let mean = samples.iter().map(|(v, wt)| v * wt).sum::<f64>() / total;
        let var = samples.iter().map(|(v, wt)| wt * (v - mean).powi(2)).sum::<f64>() / total;
        feat[i] = mean as f32;
        feat[n + i] = var.sqrt() as f32;
    }
    let base = Tensor::new(vec![COND_CHANNELS, h, w], feat)?;
    let hr = resize_bicubic(&base, scale_factor as f64)?;
    let half = box_downsample(&hr, 2)?;
    let quarter = box_downsample(&half, 2)?;
    ConditioningFeatures::new(vec![hr, half, quarter])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{estimate_shifts, FrameShift};
    use crate::burst::{procedural_image, synthesize_burst, DegradationParams, Motion};
    use crate::rng::RngStream;

    fn sample_stack() -> BurstStack {
        let mut rng = RngStream::new(9, 0);
        let hr = procedural_image(32, &mut rng).unwrap();
        let params = DegradationParams { scale_factor: 2, max_translation: 3.0, burst_size: 5, ..DegradationParams::for_crop(32) };
        synthesize_burst(&hr, &params, &rng.split(5)).unwrap()
    }

    #[test]
    fn scale_shapes() {
        let stack = sample_stack();
        let f = encode_burst(&stack, &estimate_shifts(&stack).unwrap(), 2).unwrap();
        assert_eq!(f.scales[0].dims(), &[6, 32, 32]);
        assert_eq!(f.scales[1].dims(), &[6, 16, 16]);
        assert_eq!(f.scales[2].dims(), &[6, 8, 8]);
    }

    #[test]
    fn duplicate_frames_have_zero_spread() {
        let stack = sample_stack();
        let frames = vec![stack.frames[0].clone(); 4];
        let dup = BurstStack::new(frames, vec![Motion::ZERO; 4], 0).unwrap();
        let align = AlignmentEstimate { shifts: vec![FrameShift { dx: 0.0, dy: 0.0, confidence: 1.0 }; 4] };
        let f = encode_burst(&dup, &align, 2).unwrap();
        for s in &f.scales {
            let n = s.len() / 2;
            assert!(s.data()[n..].iter().all(|&v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn permutation_invariant() {
        let stack = sample_stack();
        let align = estimate_shifts(&stack).unwrap();
        let a = encode_burst(&stack, &align, 2).unwrap();
        let order = [0usize, 3, 1, 4, 2];
        let frames = order.iter().map(|&i| stack.frames[i].clone()).collect();
        let offsets = order.iter().map(|&i| stack.offsets[i]).collect();
        let permuted = BurstStack::new(frames, offsets, 0).unwrap();
        let palign = AlignmentEstimate { shifts: order.iter().map(|&i| align.shifts[i]).collect() };
        assert_eq!(encode_burst(&permuted, &palign, 2).unwrap(), a);
    }
}
