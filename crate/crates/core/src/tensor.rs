//! Dense row-major `f32` tensors and the BTSR container format.
//!
//! A BTSR file is `b"BTSR"`, `u32` version (1), `u32` ndim, `ndim` × `u32`
//! dims, then the `f32` payload. Every field is little-endian. Several
//! records may be concatenated in one stream (checkpoints do this).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"BTSR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        check_dims(dims)?;
        let n = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected [C,H,W], got {:?}", self.dims)),
        }
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data)
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        self.map(|v| v + s)
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Order-sensitive digest of the payload, used in sampler traces.
    pub fn checksum(&self) -> f64 {
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 * (1.0 + (i % 7) as f64))
            .sum()
    }

    /// Channel `c` of a `[C,H,W]` tensor as `[1,H,W]`.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (ch, h, w) = self.chw()?;
        if c >= ch {
            return shape_err(format!("channel {c} out of range for {ch}"));
        }
        Ok(Tensor {
            dims: vec![1, h, w],
            data: self.data[c * h * w..(c + 1) * h * w].to_vec(),
        })
    }

    /// Stack equally shaped `[1,H,W]`/`[C,H,W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (_, h, w) = first.chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return shape_err(format!("spatial mismatch {:?} vs {:?}", p.dims, first.dims));
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![c_total, h, w], data)
    }

    pub fn write_btsr<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_btsr<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let ndim = read_u32(&mut r)? as usize;
        if ndim == 0 || ndim > 16 {
            return Err(Error::Format(format!("implausible ndim {ndim}")));
        }
        let dims = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_btsr(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        Tensor::read_btsr(BufReader::new(File::open(path)?))
    }

    /// Writes a `[3,H,W]` tensor as an 8-bit RGB PNG, clamping to `[0,1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (c, h, w) = self.chw()?;
        if c != 3 {
            return shape_err(format!("PNG export needs 3 channels, got {c}"));
        }
        let plane = h * w;
        let mut rgb = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for ch in 0..3 {
                let v = self.data[ch * plane + i].clamp(0.0, 1.0);
                rgb.push((v * 255.0).round() as u8);
            }
        }
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::EmptyShape);
    }
    Ok(())
}
