//! Synthetic RAW bursts: warp → box downsample → RGGB mosaic → noise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{param_err, shape_err, Error, Result};
use crate::resample::{box_downsample, warp_affine};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Rigid motion of one frame at HR scale: pixels and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Motion {
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
}

impl Motion {
    pub const ZERO: Motion = Motion {
        dx: 0.0,
        dy: 0.0,
        theta: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationParams {
    /// Largest |dx|, |dy| in HR pixels.
    pub max_translation: f64,
    /// Largest |theta| in degrees.
    pub max_rotation: f64,
    pub scale_factor: usize,
    pub noise_sigma: f64,
    pub burst_size: usize,
    /// Seed for dataset generation; [`synthesize_burst`] itself draws from the stream it is given.
    pub seed: u64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self::for_crop(64)
    }
}

impl DegradationParams {
    /// Defaults for a square HR crop of side `crop`; the translation range is
    /// 24 px at a 256 px crop and scales linearly.
    pub fn for_crop(crop: usize) -> Self {
        Self {
            max_translation: 24.0 * crop as f64 / 256.0,
            max_rotation: 1.0,
            scale_factor: 4,
            noise_sigma: 0.02,
            burst_size: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation >= 0.0) {
            return param_err("max_translation must be >= 0");
        }
        if !(self.max_rotation >= 0.0) || self.max_rotation >= 90.0 {
            return param_err("max_rotation must be in [0, 90)");
        }
        if ![2, 4, 8].contains(&self.scale_factor) {
            return param_err(format!("scale_factor must be 2, 4 or 8, got {}", self.scale_factor));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return param_err("noise_sigma must be in [0, 1]");
        }
        if self.burst_size == 0 {
            return param_err("burst_size must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstStack {
    /// `[4, h, w]` RGGB planes, values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub offsets: Vec<Motion>,
    pub reference_index: usize,
}

impl BurstStack {
    pub fn new(frames: Vec<Tensor>, offsets: Vec<Motion>, reference_index: usize) -> Result<Self> {
        if frames.is_empty() {
            return shape_err("burst has no frames");
        }
        if frames.len() != offsets.len() {
            return shape_err(format!("{} frames but {} offsets", frames.len(), offsets.len()));
        }
        if reference_index >= frames.len() {
            return shape_err(format!("reference index {reference_index} out of range"));
        }
        let dims = frames[0].dims().to_vec();
        if dims.len() != 3 || dims[0] != 4 {
            return shape_err(format!("frames must be [4,h,w], got {dims:?}"));
        }
        if frames.iter().any(|f| f.dims() != dims.as_slice()) {
            return shape_err("frames differ in shape");
        }
        Ok(Self {
            frames,
            offsets,
            reference_index,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(h, w)` of each RAW plane.
    pub fn plane_size(&self) -> (usize, usize) {
        let d = self.frames[0].dims();
        (d[1], d[2])
    }

    pub fn reference(&self) -> &Tensor {
        &self.frames[self.reference_index]
    }
}

/// RGGB mosaic of an RGB image: plane 0 = R at (even, even), 1 = G at
/// (even, odd), 2 = G at (odd, even), 3 = B at (odd, odd).
pub fn mosaic_rggb(rgb: &Tensor) -> Result<Tensor> {
    let (c, h, w) = rgb.chw()?;
    if c != 3 {
        return shape_err(format!("mosaic needs 3 channels, got {c}"));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("mosaic needs even H and W, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = rgb.data();
    // (source channel, row offset, column offset) per output plane
    const LAYOUT: [(usize, usize, usize); 4] = [(0, 0, 0), (1, 0, 1), (1, 1, 0), (2, 1, 1)];
    let mut out = Vec::with_capacity(4 * oh * ow);
    for &(ch, ry, rx) in &LAYOUT {
        for y in 0..oh {
            for x in 0..ow {
                out.push(src[ch * h * w + (2 * y + ry) * w + 2 * x + rx]);
            }
        }
    }
    Tensor::new(vec![4, oh, ow], out)
}

/// Noise stream used for frame `k` of a burst drawn from `rng`.
pub fn frame_noise_stream(rng: &RngStream, k: usize) -> RngStream {
    rng.split(1 + k as u64)
}

/// Degrades one HR image into one RAW frame under a known motion.
pub fn degrade_frame(
    hr: &Tensor,
    motion: Motion,
    params: &DegradationParams,
    noise: &mut RngStream,
) -> Result<Tensor> {
    let warped = if motion == Motion::ZERO {
        hr.clone()
    } else {
        warp_affine(hr, motion.dx, motion.dy, motion.theta)?
    };
    let lr = box_downsample(&warped, params.scale_factor)?;
    let raw = mosaic_rggb(&lr)?;
    if params.noise_sigma == 0.0 {
        return Ok(raw.clamp(0.0, 1.0));
    }
    let eps = noise.gaussian(raw.dims())?;
    Ok(raw.lincomb(1.0, &eps, params.noise_sigma as f32)?.clamp(0.0, 1.0))
}

/// Builds a burst from one HR image. Frame 0 is the reference; every other
/// frame gets a uniformly drawn translation and rotation.
pub fn synthesize_burst(hr: &Tensor, params: &DegradationParams, rng: &RngStream) -> Result<BurstStack> {
    params.validate()?;
    let (c, h, w) = hr.chw()?;
    let block = 2 * params.scale_factor;
    if c != 3 || h % block != 0 || w % block != 0 {
        return shape_err(format!(
            "HR must be [3,H,W] with H,W divisible by {block}, got {:?}",
            hr.dims()
        ));
    }
    let mut motion_rng = rng.split(0);
    let mut frames = Vec::with_capacity(params.burst_size);
    let mut offsets = Vec::with_capacity(params.burst_size);
    for k in 0..params.burst_size {
        let motion = if k == 0 {
            Motion::ZERO
        } else {
            Motion {
                dx: motion_rng.uniform(-params.max_translation, params.max_translation),
                dy: motion_rng.uniform(-params.max_translation, params.max_translation),
                theta: motion_rng.uniform(-params.max_rotation, params.max_rotation),
            }
        };
        let mut noise = frame_noise_stream(rng, k);
        frames.push(degrade_frame(hr, motion, params, &mut noise)?);
        offsets.push(motion);
    }
    BurstStack::new(frames, offsets, 0)
}

/// Smooth random RGB test scene: oriented gratings, soft discs and one
/// straight edge, normalised into `[0.05, 0.95]`.
pub fn procedural_image(size: usize, rng: &mut RngStream) -> Result<Tensor> {
    let n = size as f64;
    let mut planes = vec![vec![0f64; size * size]; 3];
    let base: Vec<f64> = (0..3).map(|_| rng.uniform(0.25, 0.75)).collect();
    for (p, b) in planes.iter_mut().zip(&base) {
        p.iter_mut().for_each(|v| *v = *b);
    }
    for _ in 0..3 {
        let period = rng.uniform(n / 5.0, n / 1.5);
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let amp: Vec<f64> = (0..3).map(|_| rng.uniform(-0.15, 0.15)).collect();
        let (s, c) = angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let t = (c * x as f64 + s * y as f64) * std::f64::consts::TAU / period + phase;
                let v = t.sin();
                for ch in 0..3 {
                    planes[ch][y * size + x] += amp[ch] * v;
                }
            }
        }
    }
    for _ in 0..2 {
        let cy = rng.uniform(0.0, n);
        let cx = rng.uniform(0.0, n);
        let r = rng.uniform(n / 10.0, n / 4.0);
        let amp: Vec<f64> = (0..3).map(|_| rng.uniform(-0.25, 0.25)).collect();
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                let m = 1.0 / (1.0 + ((d - r) / 1.5).exp());
                for ch in 0..3 {
                    planes[ch][y * size + x] += amp[ch] * m;
                }
            }
        }
    }
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let off = rng.uniform(-n / 4.0, n / 4.0);
    let amp: Vec<f64> = (0..3).map(|_| rng.uniform(-0.2, 0.2)).collect();
    let (s, c) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let t = c * (x as f64 - n / 2.0) + s * (y as f64 - n / 2.0) - off;
            let m = 1.0 / (1.0 + (-t / 0.8).exp());
            for ch in 0..3 {
                planes[ch][y * size + x] += amp[ch] * m;
            }
        }
    }
    let (lo, hi) = planes
        .iter()
        .flatten()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    // keep the dynamic range but never exceed [0.05, 0.95]
    let (scale, shift) = if span > 0.9 {
        (0.9 / span, 0.05 - lo * 0.9 / span)
    } else {
        (1.0, (0.5 - (lo + hi) / 2.0).clamp(0.05 - lo, 0.95 - hi))
    };
    let data = planes
        .into_iter()
        .flatten()
        .map(|v| (v * scale + shift) as f32)
        .collect();
    Tensor::new(vec![3, size, size], data)
}

/// One dataset entry.
#[derive(Debug, Clone)]
pub struct BurstSample {
    pub hr: Tensor,
    pub burst: BurstStack,
}

/// Generates `count` HR images of side `crop` and their bursts. Entry `i`
/// depends only on `(params.seed, i)`.
pub fn generate_dataset(count: usize, crop: usize, params: &DegradationParams) -> Result<Vec<BurstSample>> {
    (0..count)
        .map(|i| {
            let root = RngStream::new(params.seed, i as u64);
            let mut img_rng = root.split(1000);
            let hr = procedural_image(crop, &mut img_rng)?;
            let burst = synthesize_burst(&hr, params, &root.split(2000))?;
            Ok(BurstSample { hr, burst })
        })
        .collect()
}

/// Writes `hr/NNNN.btsr`, `burst/NNNN_f{K}.btsr` and `meta/NNNN.txt`.
pub fn write_dataset(dir: &Path, samples: &[BurstSample]) -> Result<()> {
    for sub in ["hr", "burst", "meta"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, s) in samples.iter().enumerate() {
        s.hr.save(dir.join("hr").join(format!("{i:04}.btsr")))?;
        let mut meta = String::new();
        for (k, (frame, m)) in s.burst.frames.iter().zip(&s.burst.offsets).enumerate() {
            frame.save(dir.join("burst").join(format!("{i:04}_f{k}.btsr")))?;
            writeln!(meta, "{k} {:?} {:?} {:?}", m.dx, m.dy, m.theta).expect("string write");
        }
        fs::write(dir.join("meta").join(format!("{i:04}.txt")), meta)?;
    }
    Ok(())
}

pub fn read_meta(text: &str) -> Result<Vec<Motion>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("meta line {}: {line:?}", line_no + 1));
        if parts.len() != 4 {
            return Err(bad());
        }
        let k: usize = parts[0].parse().map_err(|_| bad())?;
        if k != out.len() {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(Motion {
            dx: num(parts[1])?,
            dy: num(parts[2])?,
            theta: num(parts[3])?,
        });
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<BurstSample>> {
    let mut samples = Vec::new();
    for i in 0.. {
        let hr_path = dir.join("hr").join(format!("{i:04}.btsr"));
        if !hr_path.exists() {
            break;
        }
        let hr = Tensor::load(&hr_path)?;
        let offsets = read_meta(&fs::read_to_string(dir.join("meta").join(format!("{i:04}.txt")))?)?;
        let frames = (0..offsets.len())
            .map(|k| Tensor::load(dir.join("burst").join(format!("{i:04}_f{k}.btsr"))))
            .collect::<Result<Vec<_>>>()?;
        let reference_index = offsets
            .iter()
            .position(|m| *m == Motion::ZERO)
            .ok_or_else(|| Error::Format(format!("burst {i} has no zero-motion frame")))?;
        samples.push(BurstSample {
            hr,
            burst: BurstStack::new(frames, offsets, reference_index)?,
        });
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("no dataset found under {}", dir.display())));
    }
    Ok(samples)
}
