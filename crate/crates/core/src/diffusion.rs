//! Forward noising, clean-image recovery, score conversion and the reverse update.
//!
//! Every function is pure: noise is always supplied by the caller.

use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

fn check_inputs(s: &NoiseSchedule, t: usize, a: &ImageTensor, b: &ImageTensor, what: &'static str) -> Result<()> {
    s.check_t(t)?;
    a.ensure_same_shape(b)?;
    a.check_finite(what)?;
    b.check_finite(what)
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, s: &NoiseSchedule) -> Result<ImageTensor> {
    check_inputs(s, t, x0, eps, "forward_sample input")?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Inverts the forward marginal given a noise estimate.
pub fn predict_x0(x_t: &ImageTensor, t: usize, eps_hat: &ImageTensor, s: &NoiseSchedule) -> Result<ImageTensor> {
    check_inputs(s, t, x_t, eps_hat, "predict_x0 input")?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Score of the noisy marginal implied by a noise estimate.
pub fn score_from_eps(eps_hat: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
    s.check_t(t)?;
    eps_hat.check_finite("score_from_eps input")?;
    let d = (1.0 - s.alpha_bar(t)).sqrt();
    Ok(eps_hat.map(|e| -e / d))
}

/// Ancestral reverse step `x_t -> x_{t-1}`. `z` is ignored at `t = 1`.
pub fn reverse_step(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    z: &ImageTensor,
    s: &NoiseSchedule,
) -> Result<ImageTensor> {
    check_inputs(s, t, x_t, eps_hat, "reverse_step input")?;
    x_t.ensure_same_shape(z)?;
    z.check_finite("reverse_step noise")?;
    let a = s.alpha(t);
    let inv = 1.0 / a.sqrt();
    let k = (1.0 - a) / (1.0 - s.alpha_bar(t)).sqrt();
    let sigma = if t == 1 { 0.0 } else { s.sigma(t) };
    let mut out = x_t.zip_map(eps_hat, |x, e| inv * (x - k * e))?;
    if sigma != 0.0 {
        for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * zv;
        }
    }
    Ok(out)
}

/// The four additive parts of a guided reverse step.
#[derive(Debug, Clone)]
pub struct StepTerms {
    pub scaled: ImageTensor,
    pub unconditional: ImageTensor,
    pub guidance: ImageTensor,
    pub noise: ImageTensor,
}

impl StepTerms {
    pub fn total(&self) -> Result<ImageTensor> {
        // Accumulate in the same order as `guided_reverse_step`.
        let mut out = self.scaled.add(&self.unconditional)?;
        out = out.add(&self.guidance)?;
        out.add(&self.noise)
    }
}

/// Splits a guided reverse step into scaling, unconditional guidance,
/// multimodal guidance and noise.
pub fn guided_step_terms(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    guidance_sum: &ImageTensor,
    z: &ImageTensor,
    s: &NoiseSchedule,
) -> Result<StepTerms> {
    check_inputs(s, t, x_t, eps_hat, "guided_reverse_step input")?;
    x_t.ensure_same_shape(guidance_sum)?;
    x_t.ensure_same_shape(z)?;
    guidance_sum.check_finite("guidance term")?;
    z.check_finite("reverse_step noise")?;
    let a = s.alpha(t);
    let inv = 1.0 / a.sqrt();
    let coef = inv * (1.0 - a);
    let score = score_from_eps(eps_hat, t, s)?;
    let sigma = if t == 1 { 0.0 } else { s.sigma(t) };
    Ok(StepTerms {
        scaled: x_t.scale(inv),
        unconditional: score.scale(coef),
        guidance: guidance_sum.scale(coef),
        noise: z.scale(sigma),
    })
}

/// Reverse step with an additive multimodal guidance gradient.
pub fn guided_reverse_step(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    guidance_sum: &ImageTensor,
    z: &ImageTensor,
    s: &NoiseSchedule,
) -> Result<ImageTensor> {
    guided_step_terms(x_t, t, eps_hat, guidance_sum, z, s)?.total()
}
