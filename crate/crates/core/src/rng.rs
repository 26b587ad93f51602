//! Counter-based random streams.
//!
//! A stream is the triple `(seed, stream_id, counter)`. Values are produced
//! by ChaCha8 keyed on `seed`, with `stream_id` selecting the ChaCha stream
//! and `counter` the word position, so any draw can be replayed from the
//! triple alone and streams never interfere with one another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream; a pure function of `(self.seed, self.stream_id, index)`.
    pub fn split(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, splitmix(self.stream_id ^ splitmix(index.wrapping_add(1))))
    }

    fn with_engine<T>(&mut self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        let mut engine = ChaCha8Rng::seed_from_u64(self.seed);
        engine.set_stream(self.stream_id);
        engine.set_word_pos(self.counter as u128);
        let out = f(&mut engine);
        self.counter = engine.get_word_pos() as u64;
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.with_engine(|e| e.next_u64())
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.with_engine(|e| e.gen_range(lo..hi))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.with_engine(|e| e.sample::<f64, _>(StandardNormal))
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.with_engine(|e| e.gen_range(0..n))
    }

    /// i.i.d. `N(0, 1)` samples of the given shape.
    pub fn gaussian(&mut self, dims: &[usize]) -> Result<Tensor> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::EmptyShape);
        }
        let n: usize = dims.iter().product();
        let data = self.with_engine(|e| {
            (0..n)
                .map(|_| e.sample::<f32, _>(StandardNormal))
                .collect::<Vec<_>>()
        });
        Tensor::new(dims.to_vec(), data)
    }
}

/// Free-function form of [`RngStream::gaussian`].
pub fn gaussian_noise(rng: &mut RngStream, dims: &[usize]) -> Result<Tensor> {
    rng.gaussian(dims)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn million_draws_are_standard_normal() {
        let mut rng = RngStream::new(7, 0);
        let t = rng.gaussian(&[1_000_000]).unwrap();
        let n = t.len() as f64;
        let mean = t.mean();
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn replay_is_identical() {
        let rng = RngStream::new(42, 3);
        let a = rng.clone().gaussian(&[1]).unwrap();
        let b = rng.clone().gaussian(&[1]).unwrap();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn distinct_streams_differ() {
        let a = RngStream::new(42, 0).gaussian(&[16]).unwrap();
        let b = RngStream::new(42, 1).gaussian(&[16]).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x != y));
    }

    #[test]
    fn interleaving_does_not_matter() {
        let mut a = RngStream::new(1, 10);
        let mut b = RngStream::new(1, 11);
        let a1 = a.gaussian(&[5]).unwrap();
        let _ = b.gaussian(&[100]).unwrap();
        let a2 = a.gaussian(&[5]).unwrap();

        let mut c = RngStream::new(1, 10);
        let joined = c.gaussian(&[10]).unwrap();
        assert_eq!(&joined.data()[..5], a1.data());
        assert_eq!(&joined.data()[5..], a2.data());
    }

    #[test]
    fn zero_dim_is_rejected() {
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(rng.gaussian(&[4, 0]), Err(Error::EmptyShape)));
    }

    #[test]
    fn split_is_pure() {
        let r = RngStream::new(9, 2);
        assert_eq!(r.split(5), r.split(5));
        assert_ne!(r.split(5).stream_id(), r.split(6).stream_id());
    }
}
