//! The noise-prediction contract and exact, training-free implementations.
//!
//! Each oracle returns the Bayes-optimal noise estimate `E[eps | x_t]` for a
//! known data distribution, so the fusion pipeline can run without a network.

use std::sync::Arc;

use crate::diffusion::predict_x0;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, RngStream};

/// Anything that predicts the noise contained in `x_t` at timestep `t`.
///
/// `t` indexes `s`; implementations that wrap a real network should query it
/// with `s.source_step(t)`.
pub trait Denoiser: Send + Sync {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor>;

    /// Noise estimate and clean-image estimate `(eps_hat, x0_hat)`.
    ///
    /// The default inverts the forward marginal. Oracles that know
    /// `E[x0 | x_t]` in closed form return it directly, so a point-mass
    /// posterior reproduces its atom bit for bit.
    fn predict(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
        let eps = self.predict_eps(x_t, t, s)?;
        let x0 = predict_x0(x_t, t, &eps, s)?;
        Ok((eps, x0))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        (**self).predict_eps(x_t, t, s)
    }

    fn predict(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
        (**self).predict(x_t, t, s)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        (**self).predict_eps(x_t, t, s)
    }

    fn predict(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
        (**self).predict(x_t, t, s)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        (**self).predict_eps(x_t, t, s)
    }

    fn predict(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
        (**self).predict(x_t, t, s)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        s.check_t(t)?;
        let (h, w, c) = x_t.shape();
        Ok(ImageTensor::zeros(h, w, c))
    }
}

fn eps_from_x0(x_t: &ImageTensor, x0: &ImageTensor, ab: f64) -> Result<ImageTensor> {
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = x_t.zip_map(x0, |x, m| (x - a * m) / b)?;
    out.check_finite("oracle noise estimate")?;
    Ok(out)
}

/// Exact denoiser for `x0 ~ N(mu, var * I)`.
#[derive(Debug, Clone)]
pub struct GaussianDataOracle {
    mu: ImageTensor,
    var: f64,
}

impl GaussianDataOracle {
    pub fn new(mu: ImageTensor, var: f64) -> Result<Self> {
        if !(var >= 0.0 && var.is_finite()) {
            return Err(Error::validation("var", format!("{var} must be finite and >= 0")));
        }
        mu.check_finite("oracle mean")?;
        Ok(GaussianDataOracle { mu, var })
    }

    pub fn mu(&self) -> &ImageTensor {
        &self.mu
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    /// `E[x0 | x_t] = mu + sqrt(abar) var / (abar var + 1 - abar) (x_t - sqrt(abar) mu)`.
    pub fn posterior_mean(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        s.check_t(t)?;
        let ab = s.alpha_bar(t);
        let k = ab.sqrt() * self.var / (ab * self.var + 1.0 - ab);
        x_t.zip_map(&self.mu, |x, m| m + k * (x - ab.sqrt() * m))
    }

    /// Closed-form score of the noisy marginal `N(sqrt(abar) mu, (abar var + 1 - abar) I)`.
    pub fn score(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        s.check_t(t)?;
        let ab = s.alpha_bar(t);
        let v = ab * self.var + 1.0 - ab;
        x_t.zip_map(&self.mu, |x, m| -(x - ab.sqrt() * m) / v)
    }

    /// Log density of the noisy marginal, up to nothing (fully normalized).
    pub fn log_marginal(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<f64> {
        s.check_t(t)?;
        let ab = s.alpha_bar(t);
        let v = ab * self.var + 1.0 - ab;
        let n = x_t.len() as f64;
        let q: f64 = x_t
            .zip_map(&self.mu, |x, m| (x - ab.sqrt() * m).powi(2))?
            .data()
            .iter()
            .sum();
        Ok(-0.5 * q / v - 0.5 * n * (2.0 * std::f64::consts::PI * v).ln())
    }
}

impl Denoiser for GaussianDataOracle {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        let score = self.score(x_t, t, s)?;
        let k = -(1.0 - s.alpha_bar(t)).sqrt();
        let eps = score.scale(k);
        eps.check_finite("oracle noise estimate")?;
        Ok(eps)
    }

    fn predict(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
        let eps = self.predict_eps(x_t, t, s)?;
        Ok((eps, self.posterior_mean(x_t, t, s)?))
    }
}

/// Exact denoiser for a uniform mixture of point masses (a finite dataset).
#[derive(Debug, Clone)]
pub struct EmpiricalDataOracle {
    atoms: Vec<ImageTensor>,
}

impl EmpiricalDataOracle {
    pub fn new(atoms: Vec<ImageTensor>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::validation("atoms", "need at least one atom"))?;
        for a in &atoms {
            first.ensure_same_shape(a)?;
            a.check_finite("atom")?;
        }
        Ok(EmpiricalDataOracle { atoms })
    }

    pub fn atoms(&self) -> &[ImageTensor] {
        &self.atoms
    }

    fn log_kernels(&self, x_t: &ImageTensor, ab: f64) -> Result<Vec<f64>> {
        let a = ab.sqrt();
        let denom = 2.0 * (1.0 - ab);
        self.atoms
            .iter()
            .map(|atom| {
                x_t.ensure_same_shape(atom)?;
                let d2: f64 = x_t
                    .data()
                    .iter()
                    .zip(atom.data())
                    .map(|(x, m)| (x - a * m).powi(2))
                    .sum();
                Ok(-d2 / denom)
            })
            .collect()
    }

    /// Posterior responsibilities of each atom given `x_t`.
    pub fn posterior_weights(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
        s.check_t(t)?;
        let logits = self.log_kernels(x_t, s.alpha_bar(t))?;
        Ok(softmax(&logits))
    }

    /// `E[x0 | x_t]` under the mixture.
    pub fn posterior_mean(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        let w = self.posterior_weights(x_t, t, s)?;
        let (h, wd, c) = x_t.shape();
        let mut mean = ImageTensor::zeros(h, wd, c);
        for (wi, atom) in w.iter().zip(&self.atoms) {
            if *wi == 0.0 {
                continue;
            }
            for (m, a) in mean.data_mut().iter_mut().zip(atom.data()) {
                *m += wi * a;
            }
        }
        Ok(mean)
    }

    pub fn log_marginal(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<f64> {
        s.check_t(t)?;
        let ab = s.alpha_bar(t);
        let logits = self.log_kernels(x_t, ab)?;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let n = x_t.len() as f64;
        Ok(lse - (self.atoms.len() as f64).ln() - 0.5 * n * (2.0 * std::f64::consts::PI * (1.0 - ab)).ln())
    }
}

impl Denoiser for EmpiricalDataOracle {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        self.predict(x_t, t, s).map(|(eps, _)| eps)
    }

    fn predict(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
        let mean = self.posterior_mean(x_t, t, s)?;
        Ok((eps_from_x0(x_t, &mean, s.alpha_bar(t))?, mean))
    }
}

/// Max-shifted softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Orthonormal DCT-II matrix of size `n x n`, row `k` is basis vector `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

/// Exact denoiser for a stationary Gaussian image prior whose covariance is
/// diagonal in the 2-D DCT basis.
///
/// With a power-law spectrum this behaves like a natural-image prior: coarse
/// structure carries most of the variance and is resolved at high noise
/// levels, fine texture only near the end of the reverse chain.
#[derive(Debug, Clone)]
pub struct SpectralGaussianOracle {
    mu: ImageTensor,
    /// Per-coefficient variances, `height * width`, row-major in (u, v).
    spectrum: Vec<f64>,
    dct_h: Vec<f64>,
    dct_w: Vec<f64>,
}

impl SpectralGaussianOracle {
    pub fn new(mu: ImageTensor, spectrum: Vec<f64>) -> Result<Self> {
        let (h, w, _) = mu.shape();
        if spectrum.len() != h * w {
            return Err(Error::validation("spectrum", "length must be height * width"));
        }
        if spectrum.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::validation("spectrum", "variances must be finite and >= 0"));
        }
        mu.check_finite("oracle mean")?;
        Ok(SpectralGaussianOracle {
            mu,
            spectrum,
            dct_h: dct_matrix(h),
            dct_w: dct_matrix(w),
        })
    }

    /// Zero-mean prior with spectrum `1 / (1 + (u^2 + v^2) / corner^2)`,
    /// rescaled so the average pixel variance equals `pixel_var`.
    pub fn power_law(height: usize, width: usize, channels: usize, pixel_var: f64, corner: f64) -> Result<Self> {
        if !(pixel_var > 0.0 && corner > 0.0) {
            return Err(Error::validation("pixel_var", "variance and corner must be positive"));
        }
        let mut spectrum: Vec<f64> = (0..height)
            .flat_map(|u| {
                (0..width).map(move |v| {
                    let f2 = (u * u + v * v) as f64;
                    1.0 / (1.0 + f2 / (corner * corner))
                })
            })
            .collect();
        let mean = spectrum.iter().sum::<f64>() / spectrum.len() as f64;
        for s in &mut spectrum {
            *s *= pixel_var / mean;
        }
        Self::new(ImageTensor::zeros(height, width, channels), spectrum)
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn mu(&self) -> &ImageTensor {
        &self.mu
    }

    /// Forward DCT of one channel: `D_h X D_w^T`.
    pub fn analyze(&self, img: &ImageTensor, channel: usize) -> Vec<f64> {
        let (h, w, _) = img.shape();
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for v in 0..w {
                let row = &self.dct_w[v * w..(v + 1) * w];
                tmp[y * w + v] = (0..w).map(|x| row[x] * img.get(y, x, channel)).sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for u in 0..h {
            let row = &self.dct_h[u * h..(u + 1) * h];
            for v in 0..w {
                out[u * w + v] = (0..h).map(|y| row[y] * tmp[y * w + v]).sum();
            }
        }
        out
    }

    /// Inverse DCT of one channel's coefficients into `img`.
    pub fn synthesize_into(&self, coef: &[f64], img: &mut ImageTensor, channel: usize) {
        let (h, w, _) = img.shape();
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for v in 0..w {
                tmp[y * w + v] = (0..h).map(|u| self.dct_h[u * h + y] * coef[u * w + v]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let val = (0..w).map(|v| self.dct_w[v * w + x] * tmp[y * w + v]).sum();
                img.set(y, x, channel, val);
            }
        }
    }

    /// Draws one image from the prior.
    pub fn sample(&self, rng: &mut RngStream) -> ImageTensor {
        let (h, w, c) = self.mu.shape();
        let mut img = self.mu.clone();
        let mut field = ImageTensor::zeros(h, w, c);
        for ch in 0..c {
            let coef: Vec<f64> = self.spectrum.iter().map(|l| l.sqrt() * rng.normal()).collect();
            self.synthesize_into(&coef, &mut field, ch);
        }
        for (o, f) in img.data_mut().iter_mut().zip(field.data()) {
            *o += f;
        }
        img
    }

    fn centered(&self, x_t: &ImageTensor, ab: f64) -> Result<ImageTensor> {
        let a = ab.sqrt();
        x_t.zip_map(&self.mu, |x, m| x - a * m)
    }

    /// `E[x0 | x_t]`, computed coefficient-wise in the DCT domain.
    pub fn posterior_mean(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        s.check_t(t)?;
        let ab = s.alpha_bar(t);
        let y = self.centered(x_t, ab)?;
        let mut out = self.mu.clone();
        let mut field = ImageTensor::zeros(y.height(), y.width(), y.channels());
        for ch in 0..y.channels() {
            let mut coef = self.analyze(&y, ch);
            for (c, l) in coef.iter_mut().zip(&self.spectrum) {
                *c *= ab.sqrt() * l / (ab * l + 1.0 - ab);
            }
            self.synthesize_into(&coef, &mut field, ch);
        }
        for (o, f) in out.data_mut().iter_mut().zip(field.data()) {
            *o += f;
        }
        Ok(out)
    }

    pub fn log_marginal(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<f64> {
        s.check_t(t)?;
        let ab = s.alpha_bar(t);
        let y = self.centered(x_t, ab)?;
        let mut acc = 0.0;
        for ch in 0..y.channels() {
            let coef = self.analyze(&y, ch);
            for (c, l) in coef.iter().zip(&self.spectrum) {
                let v = ab * l + 1.0 - ab;
                acc += -0.5 * c * c / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
            }
        }
        Ok(acc)
    }
}

impl Denoiser for SpectralGaussianOracle {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        self.predict(x_t, t, s).map(|(eps, _)| eps)
    }

    fn predict(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
        let mean = self.posterior_mean(x_t, t, s)?;
        Ok((eps_from_x0(x_t, &mean, s.alpha_bar(t))?, mean))
    }
}
