//! Named parameter tensors and their checkpoint format.
//!
//! A checkpoint directory holds `manifest.txt` (one `name d0xd1x…` line per
//! tensor, in order) and `weights.btsr` (the tensors as consecutive BTSR
//! records in the same order).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        self.tensors[i].data()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.dims()).expect("non-empty"))
                .collect(),
        }
    }

    fn check_layout(&self, other: &Params) -> Result<()> {
        if self.names != other.names || self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.dims() != b.dims()) {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, other: &Params, s: f32) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    pub fn distance(&self, other: &Params) -> Result<f64> {
        self.check_layout(other)?;
        let s: f64 = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)))
            .sum();
        Ok(s.sqrt())
    }

    /// Exponential moving average toward `online`: `self = d·self + (1−d)·online`.
    pub fn ema_toward(&mut self, online: &Params, decay: f64) -> Result<()> {
        self.check_layout(online)?;
        for (a, b) in self.tensors.iter_mut().zip(&online.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = (decay * *x as f64 + (1.0 - decay) * *y as f64) as f32;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `(tensor index, element index)` of a flat parameter position.
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return Some((i, flat));
            }
            flat -= t.len();
        }
        None
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let mut w = BufWriter::new(File::create(dir.join("weights.btsr"))?);
        for (name, t) in self.iter() {
            let dims = t.dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            manifest.push_str(&format!("{name} {dims}\n"));
            t.write_btsr(&mut w)?;
        }
        w.flush()?;
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Params> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut r = BufReader::new(File::open(dir.join("weights.btsr"))?);
        let mut out = Params::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let (name, dims) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("manifest line {line:?}")))?;
            let t = Tensor::read_btsr(&mut r)?;
            let listed: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::Format(format!("manifest dims {dims:?}"))))
                .collect::<Result<_>>()?;
            if listed != t.dims() {
                return Err(Error::Format(format!("{name}: manifest says {listed:?}, file has {:?}", t.dims())));
            }
            out.push(name, t);
        }
        Ok(out)
    }

    /// Replaces values from `other`, requiring an identical layout.
    pub fn assign(&mut self, other: &Params) -> Result<()> {
        self.check_layout(other)?;
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}
