//! Image tensors and seeded random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An `H x W x C` image of `f64` values stored row-major (channel fastest).
///
/// Model-space images live nominally in `[-1, 1]`. Tensors created with
/// [`ImageTensor::gradient_workspace`] may hold non-finite values; every other
/// constructor rejects them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    gradient: bool,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation("shape", "dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::validation(
                "data",
                format!("length {} does not match {height}x{width}x{channels}", data.len()),
            ));
        }
        let t = ImageTensor {
            height,
            width,
            channels,
            data,
            gradient: false,
        };
        t.check_finite("tensor data")?;
        Ok(t)
    }

    /// A tensor that is allowed to carry non-finite entries.
    pub fn gradient_workspace(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || height * width * channels == 0 {
            return Err(Error::validation("data", "length does not match shape"));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
            gradient: true,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height * width * channels > 0, "empty tensor shape");
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            gradient: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, value)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageTensor {
            height,
            width,
            channels,
            data,
            gradient: false,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_gradient(&self) -> bool {
        self.gradient
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rejects non-finite data unless the tensor is a gradient workspace.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.gradient || self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { what })
        }
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        Ok(ImageTensor {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            gradient: self.gradient || other.gradient,
        })
    }

    pub fn scale(&self, k: f64) -> ImageTensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn dot(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// One channel as a single-channel tensor.
    pub fn channel(&self, c: usize) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }
}

/// Deterministic normal/uniform sample stream built on ChaCha20.
///
/// Child streams are derived by hashing `(seed, label, index)`, so the draws a
/// component sees depend only on its label and never on scheduling order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent named sub-stream. Does not advance `self`.
    pub fn substream(&self, label: &str, index: u64) -> RngStream {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let child_seed = u64::from_le_bytes(key[..8].try_into().unwrap());
        RngStream {
            seed: child_seed,
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, height: usize, width: usize, channels: usize) -> ImageTensor {
        let data = (0..height * width * channels).map(|_| self.normal()).collect();
        ImageTensor {
            height,
            width,
            channels,
            data,
            gradient: false,
        }
    }

    pub fn normal_like(&mut self, like: &ImageTensor) -> ImageTensor {
        self.normal_tensor(like.height, like.width, like.channels)
    }

    /// Uniform point on the probability simplex with `k` vertices.
    pub fn simplex(&mut self, k: usize) -> Vec<f64> {
        let e: Vec<f64> = (0..k).map(|_| -(1.0 - self.uniform()).ln()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_unless_gradient() {
        assert!(ImageTensor::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
        let g = ImageTensor::gradient_workspace(1, 2, 1, vec![0.0, f64::INFINITY]).unwrap();
        assert!(g.check_finite("g").is_ok());
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let t = ImageTensor::from_fn(2, 3, 2, |y, x, c| (100 * y + 10 * x + c) as f64);
        assert_eq!(t.data()[t.index(1, 2, 1)], 121.0);
        assert_eq!(t.data()[3], 11.0);
    }

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        let xa: Vec<f64> = (0..32).map(|_| a.normal()).collect();
        let xb: Vec<f64> = (0..32).map(|_| b.normal()).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn substreams_are_independent_of_parent_progress() {
        let mut parent = RngStream::new(11);
        let before = parent.substream("dig", 3).normal();
        parent.normal();
        let after = parent.substream("dig", 3).normal();
        assert_eq!(before, after);
        assert_ne!(parent.substream("dig", 3).normal(), parent.substream("dig", 4).normal());
    }

    #[test]
    fn simplex_draws_sum_to_one() {
        let mut r = RngStream::new(1);
        for _ in 0..100 {
            let w = r.simplex(3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }
}
