//! Synthetic instances with a known ideal fusion, the per-step error-bound
//! ledger, and the population statistics used to check the covariance
//! mechanism of dynamic weighting.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::denoiser::{Denoiser, GaussianDataOracle, SpectralGaussianOracle};
use crate::dig::{grid_weights_from_dig, softmax_weights, DigConfig};
use crate::error::{Error, Result};
use crate::guidance::{modality_guidance_grad, ModalityStack};
use crate::sampler::{fuse_with, FusionConfig, StepInfo, StepObserver, WeightContext, WeightMode, WeightPolicy};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, RngStream};

/// Analytic smoothness constant of the summed squared loss.
pub const LOSS_SMOOTHNESS: f64 = 2.0;
/// Pixel variance of the bench image prior.
pub const PRIOR_PIXEL_VAR: f64 = 0.25;
/// Spectral corner frequency of the bench image prior.
pub const PRIOR_CORNER: f64 = 2.0;
/// Standard deviation of the near-flat filler in masked instances.
pub const FILLER_SD: f64 = 0.05;
/// Exposure offset of blended instances.
pub const EXPOSURE_SHIFT: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    MaskedComplement,
    Blended,
    Gaussian1d,
}

impl FromStr for InstanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "masked_complement" => Ok(InstanceKind::MaskedComplement),
            "blended" => Ok(InstanceKind::Blended),
            "gaussian_1d" => Ok(InstanceKind::Gaussian1d),
            other => Err(Error::Config(format!("unknown instance kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for InstanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InstanceKind::MaskedComplement => "masked_complement",
            InstanceKind::Blended => "blended",
            InstanceKind::Gaussian1d => "gaussian_1d",
        })
    }
}

/// Modalities with a constructively known ideal fused image.
#[derive(Clone)]
pub struct TheoryInstance {
    pub kind: InstanceKind,
    pub modalities: ModalityStack,
    pub ideal: ImageTensor,
    /// How `ideal` was derived from the modalities.
    pub rule: String,
    pub denoiser: Arc<dyn Denoiser>,
    pub seed: u64,
}

impl std::fmt::Debug for TheoryInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TheoryInstance")
            .field("kind", &self.kind)
            .field("shape", &self.ideal.shape())
            .field("rule", &self.rule)
            .field("seed", &self.seed)
            .finish()
    }
}

/// Image prior shared by the bench instances and their denoiser.
pub fn bench_prior(height: usize, width: usize, channels: usize) -> Result<SpectralGaussianOracle> {
    SpectralGaussianOracle::power_law(height, width, channels, PRIOR_PIXEL_VAR, PRIOR_CORNER)
}

/// `c1 = g*M + f*(1-M)`, `c2 = g*(1-M) + f*M`; `mask` is per pixel.
pub fn masked_complement_from(
    g: &ImageTensor,
    mask: &[f64],
    filler: &ImageTensor,
) -> Result<(ImageTensor, ImageTensor)> {
    g.ensure_same_shape(filler)?;
    let (h, w, c) = g.shape();
    if mask.len() != h * w {
        return Err(Error::validation("mask", "one mask value per pixel"));
    }
    let mix = |a: &ImageTensor, b: &ImageTensor| {
        ImageTensor::from_fn(h, w, c, |y, x, ch| {
            let m = mask[y * w + x];
            a.get(y, x, ch) * m + b.get(y, x, ch) * (1.0 - m)
        })
    };
    Ok((mix(g, filler), mix(filler, g)))
}

/// Random half-plane mask through a point in the central half of the image.
fn half_plane_mask(h: usize, w: usize, rng: &mut RngStream) -> Vec<f64> {
    let theta = 2.0 * std::f64::consts::PI * rng.uniform();
    let cy = h as f64 * (0.25 + 0.5 * rng.uniform());
    let cx = w as f64 * (0.25 + 0.5 * rng.uniform());
    let (s, c) = theta.sin_cos();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            if (x - cx) * c + (y - cy) * s >= 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn make_instance(
    kind: InstanceKind,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<TheoryInstance> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::validation("shape", "dimensions must be positive"));
    }
    let root = RngStream::new(seed);
    let names = vec!["c1".to_string(), "c2".to_string()];
    match kind {
        InstanceKind::MaskedComplement => {
            let prior = bench_prior(height, width, channels)?;
            let g = prior.sample(&mut root.substream("ideal", 0));
            let mask = half_plane_mask(height, width, &mut root.substream("mask", 0));
            let filler = root
                .substream("filler", 0)
                .normal_tensor(height, width, channels)
                .scale(FILLER_SD);
            let (c1, c2) = masked_complement_from(&g, &mask, &filler)?;
            Ok(TheoryInstance {
                kind,
                modalities: ModalityStack::new(vec![c1, c2], names)?,
                ideal: g,
                rule: "ideal = g; c1 = g*M + f*(1-M); c2 = g*(1-M) + f*M".into(),
                denoiser: Arc::new(prior),
                seed,
            })
        }
        InstanceKind::Blended => {
            let prior = bench_prior(height, width, channels)?;
            let g = prior
                .sample(&mut root.substream("ideal", 0))
                .map(|v| v.clamp(-1.0, 1.0));
            let c1 = g.map(|v| (v - EXPOSURE_SHIFT).clamp(-1.0, 1.0));
            let c2 = g.map(|v| (v + EXPOSURE_SHIFT).clamp(-1.0, 1.0));
            Ok(TheoryInstance {
                kind,
                modalities: ModalityStack::new(vec![c1, c2], names)?,
                ideal: g,
                rule: format!("ideal = mid exposure g; c1/c2 = clip(g -/+ {EXPOSURE_SHIFT})"),
                denoiser: Arc::new(prior),
                seed,
            })
        }
        InstanceKind::Gaussian1d => {
            let mut r = root.substream("scalar", 0);
            let g = r.normal();
            let filler = FILLER_SD * r.normal();
            let (a, b) = if r.uniform() < 0.5 { (g, filler) } else { (filler, g) };
            Ok(TheoryInstance {
                kind,
                modalities: ModalityStack::new(vec![ImageTensor::scalar(a), ImageTensor::scalar(b)], names)?,
                ideal: ImageTensor::scalar(g),
                rule: "ideal = g; one modality carries g, the other a near-zero filler".into(),
                denoiser: Arc::new(GaussianDataOracle::new(ImageTensor::scalar(0.0), 1.0)?),
                seed,
            })
        }
    }
}

/// Projection of a guidance gradient onto the ideal direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub b: f64,
    pub cos_theta: f64,
    pub norm_grad: f64,
    /// Either vector was zero; `b` and `cos_theta` are reported as 0.
    pub degenerate: bool,
}

/// `v = -grad zeta(x_t, ideal) = 2 (ideal - x_t)` for the summed squared loss.
pub fn ideal_direction(x_t: &ImageTensor, ideal: &ImageTensor) -> Result<ImageTensor> {
    ideal.zip_map(x_t, |i, x| 2.0 * (i - x))
}

pub fn alignment_from(v: &ImageTensor, grad: &ImageTensor) -> Result<Alignment> {
    let dot = v.dot(grad)?;
    let (nv, ng) = (v.norm(), grad.norm());
    if !(dot.is_finite() && nv.is_finite() && ng.is_finite()) {
        return Err(Error::NonFinite {
            what: "alignment input",
        });
    }
    if nv == 0.0 || ng == 0.0 {
        return Ok(Alignment {
            b: 0.0,
            cos_theta: 0.0,
            norm_grad: ng,
            degenerate: true,
        });
    }
    let cos_theta = (dot / (nv * ng)).clamp(-1.0, 1.0);
    Ok(Alignment {
        b: ng * cos_theta,
        cos_theta,
        norm_grad: ng,
        degenerate: false,
    })
}

pub fn alignment_measure(
    x_t: &ImageTensor,
    t: usize,
    c_k: &ImageTensor,
    ideal: &ImageTensor,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
) -> Result<Alignment> {
    x_t.check_finite("alignment input")?;
    ideal.check_finite("alignment input")?;
    let g = modality_guidance_grad(c_k, x_t, t, d, s)?;
    alignment_from(&ideal_direction(x_t, ideal)?, &g)
}

/// Per-modality quantities at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStep {
    pub weight_mean: f64,
    pub alignment: Alignment,
    /// Applied weight at every pixel.
    pub weight_map: Vec<f64>,
    /// `v[p] . g_k[p] / |v|` at every pixel; sums to `b`.
    pub alignment_field: Vec<f64>,
}

/// One row of the bound ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerStep {
    pub t: usize,
    pub source_t: usize,
    /// `(1 / sqrt(alpha_t)) (1 - alpha_t)`.
    pub coef: f64,
    pub v_norm: f64,
    pub zeta: f64,
    /// Drift part `G(x_t, c, t)` of the one-step loss change.
    pub g_term: f64,
    /// `grad zeta . (coef * sum_k w_k g_k)`.
    pub guidance_term: f64,
    /// `grad zeta . sigma_t z_t`.
    pub noise_term: f64,
    /// `|x_{t-1} - x_t|`.
    pub delta: f64,
    pub modalities: Vec<ModalityStep>,
}

impl LedgerStep {
    pub fn a(&self) -> f64 {
        self.coef * self.v_norm
    }
}

/// Bound ledger of one fusion run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub seed: u64,
    pub steps: Vec<LedgerStep>,
    pub zeta_start: f64,
    pub zeta_end: f64,
    /// Mean squared error of the output to the ideal.
    pub gerror: f64,
}

impl RunLedger {
    /// `sum_t G + guidance + noise + (L/2) Delta^2`; for the squared loss this
    /// reproduces `zeta_end - zeta_start` exactly up to rounding.
    pub fn telescoped_change(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.g_term + s.guidance_term + s.noise_term + LOSS_SMOOTHNESS / 2.0 * s.delta * s.delta)
            .sum()
    }

    pub fn max_delta(&self) -> f64 {
        self.steps.iter().map(|s| s.delta).fold(0.0, f64::max)
    }
}

/// Step observer that fills a [`RunLedger`].
pub struct LedgerObserver<'a> {
    ideal: &'a ImageTensor,
    guidance_scale: f64,
    pub steps: Vec<LedgerStep>,
    pub zeta_start: Option<f64>,
}

impl<'a> LedgerObserver<'a> {
    pub fn new(ideal: &'a ImageTensor, guidance_scale: f64) -> Self {
        LedgerObserver {
            ideal,
            guidance_scale,
            steps: Vec::new(),
            zeta_start: None,
        }
    }
}

fn zeta(x: &ImageTensor, ideal: &ImageTensor) -> Result<f64> {
    let d = x.sub(ideal)?;
    d.dot(&d)
}

impl StepObserver for LedgerObserver<'_> {
    fn on_step(&mut self, info: &StepInfo<'_>) -> Result<()> {
        let x = info.x_t;
        let z_now = zeta(x, self.ideal)?;
        if self.zeta_start.is_none() {
            self.zeta_start = Some(z_now);
        }
        let v = ideal_direction(x, self.ideal)?;
        let v_norm = v.norm();
        let a = info.schedule.alpha(info.t);
        let coef = (1.0 - a) / a.sqrt();
        // grad zeta = -v
        let g_term = -v.dot(&info.terms.scaled.sub(x)?)? - v.dot(&info.terms.unconditional)?;
        let guidance_term = -v.dot(&info.terms.guidance)?;
        let noise_term = -v.dot(&info.terms.noise)?;
        let delta = info.x_next.sub(x)?.norm();
        let (h, w, c) = x.shape();
        let mut modalities = Vec::with_capacity(info.grads.len());
        for (k, g) in info.grads.iter().enumerate() {
            let g_eff = g.scale(self.guidance_scale);
            let alignment = alignment_from(&v, &g_eff)?;
            let mut weight_map = Vec::with_capacity(h * w);
            let mut alignment_field = Vec::with_capacity(h * w);
            for y in 0..h {
                for xx in 0..w {
                    weight_map.push(info.weights.at(k, y, xx));
                    let dot: f64 = (0..c).map(|ch| v.get(y, xx, ch) * g_eff.get(y, xx, ch)).sum();
                    alignment_field.push(if v_norm > 0.0 { dot / v_norm } else { 0.0 });
                }
            }
            modalities.push(ModalityStep {
                weight_mean: weight_map.iter().sum::<f64>() / weight_map.len() as f64,
                alignment,
                weight_map,
                alignment_field,
            });
        }
        self.steps.push(LedgerStep {
            t: info.t,
            source_t: info.schedule.source_step(info.t),
            coef,
            v_norm,
            zeta: z_now,
            g_term,
            guidance_term,
            noise_term,
            delta,
            modalities,
        });
        Ok(())
    }
}

/// Runs one instance under a weight policy and records its ledger.
pub fn run_with_ledger(
    inst: &TheoryInstance,
    s: &NoiseSchedule,
    cfg: &FusionConfig,
    policy: &mut dyn WeightPolicy,
) -> Result<(ImageTensor, RunLedger)> {
    let mut obs = LedgerObserver::new(&inst.ideal, cfg.guidance_scale);
    let out = fuse_with(&inst.modalities, inst.denoiser.as_ref(), s, cfg, policy, &mut obs)?;
    let zeta_end = zeta(&out.image, &inst.ideal)?;
    let gerror = out.image.mse(&inst.ideal)?;
    Ok((
        out.image,
        RunLedger {
            seed: inst.seed,
            steps: obs.steps,
            zeta_start: obs.zeta_start.unwrap_or(zeta_end),
            zeta_end,
            gerror,
        },
    ))
}

/// Unbiased sample covariance (two-pass).
pub fn sample_cov(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::validation("samples", "paired samples differ in length"));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientPopulation { need: 2, got: n });
    }
    // a constant variable has no covariance; the rounded mean would leave residue
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return Ok(0.0);
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    Ok(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1) as f64)
}

/// One `(t, k)` entry of the covariance report.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceRow {
    pub t: usize,
    pub source_t: usize,
    pub k: usize,
    /// `coef_t` times the population mean of `|v_t|`.
    pub a: f64,
    /// Sum over pixels of `Cov(w_k[p], B_k[p])`; equals `Cov(w_k, B_k)` for global weights.
    pub cov: f64,
    pub mean_weight: f64,
    pub mean_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub rows: Vec<CovarianceRow>,
    /// `sum_t A(t) sum_k Cov(w_k, B_k)`.
    pub weighted_sum: f64,
}

pub fn covariance_report(ledgers: &[RunLedger]) -> Result<CovarianceReport> {
    let n = ledgers.len();
    if n < 2 {
        return Err(Error::InsufficientPopulation { need: 2, got: n });
    }
    let steps = ledgers[0].steps.len();
    if ledgers.iter().any(|l| l.steps.len() != steps) {
        return Err(Error::validation("ledgers", "runs executed different step counts"));
    }
    let mut rows = Vec::new();
    let mut weighted_sum = 0.0;
    for i in 0..steps {
        let first = &ledgers[0].steps[i];
        let k_count = first.modalities.len();
        let mean_v = ledgers.iter().map(|l| l.steps[i].v_norm).sum::<f64>() / n as f64;
        let a = first.coef * mean_v;
        for k in 0..k_count {
            let pixels = first.modalities[k].weight_map.len();
            let mut cov = 0.0;
            let mut ws = vec![0.0; n];
            let mut bs = vec![0.0; n];
            for p in 0..pixels {
                for (j, l) in ledgers.iter().enumerate() {
                    let m = &l.steps[i].modalities[k];
                    ws[j] = m.weight_map[p];
                    bs[j] = m.alignment_field[p];
                }
                cov += sample_cov(&ws, &bs)?;
            }
            let mean_weight = ledgers
                .iter()
                .map(|l| l.steps[i].modalities[k].weight_mean)
                .sum::<f64>()
                / n as f64;
            let mean_b = ledgers
                .iter()
                .map(|l| l.steps[i].modalities[k].alignment.b)
                .sum::<f64>()
                / n as f64;
            weighted_sum += a * cov;
            rows.push(CovarianceRow {
                t: first.t,
                source_t: first.source_t,
                k,
                a,
                cov,
                mean_weight,
                mean_b,
            });
        }
    }
    Ok(CovarianceReport { rows, weighted_sum })
}

/// Sample covariance between `grad zeta` and the injected noise, pooled
/// over pixels per step: `Cov(-v[p], sigma z[p])` averaged over runs.
pub fn noise_covariance(ledgers: &[RunLedger]) -> Result<Vec<(usize, f64)>> {
    let n = ledgers.len();
    if n < 2 {
        return Err(Error::InsufficientPopulation { need: 2, got: n });
    }
    let steps = ledgers[0].steps.len();
    (0..steps)
        .map(|i| {
            let vals: Vec<f64> = ledgers.iter().map(|l| l.steps[i].noise_term).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            Ok((ledgers[0].steps[i].t, mean))
        })
        .collect()
}

/// Weights `(1 - mix) * softmax(gain * DIG / tau) + mix * r`, with `r` a fresh
/// uniform simplex draw per record and patch. `gain = 1, mix = 0` is the
/// dynamic rule, `gain = 0` static equal, negative gains anti-DIG.
#[derive(Debug, Clone)]
pub struct GainPolicy {
    pub gain: f64,
    pub mix: f64,
    rng: RngStream,
}

impl GainPolicy {
    pub fn new(gain: f64, mix: f64, seed: u64) -> Self {
        GainPolicy {
            gain,
            mix,
            rng: RngStream::new(seed).substream("policy-mix", 0),
        }
    }

    pub fn name(&self) -> String {
        policy_name(self.gain, self.mix)
    }
}

pub fn policy_name(gain: f64, mix: f64) -> String {
    if mix >= 1.0 {
        "random-simplex".to_string()
    } else if mix == 0.0 && gain == 1.0 {
        "dynamic".to_string()
    } else if mix == 0.0 && gain == 0.0 {
        "static-equal".to_string()
    } else if mix == 0.0 && gain == -1.0 {
        "anti-dig".to_string()
    } else {
        format!("gain={gain:+}:mix={mix}")
    }
}

impl WeightPolicy for GainPolicy {
    fn weights(&mut self, ctx: &WeightContext<'_>) -> Result<Vec<Vec<f64>>> {
        let k = ctx.modalities;
        let patches = ctx.layout.patches();
        let base = match ctx.gains {
            Some(g) if self.gain != 0.0 => {
                let scaled: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| x * self.gain).collect()).collect();
                grid_weights_from_dig(&scaled, ctx.dig)?
            }
            _ => vec![vec![1.0 / k as f64; patches]; k],
        };
        if self.mix == 0.0 {
            return Ok(base);
        }
        let mut out = base;
        for p in 0..patches {
            let r = self.rng.simplex(k);
            let mut col: Vec<f64> = (0..k).map(|j| (1.0 - self.mix) * out[j][p] + self.mix * r[j]).collect();
            let sum: f64 = col.iter().sum();
            col.iter_mut().for_each(|v| *v /= sum);
            out.iter_mut().zip(col).for_each(|(m, v)| m[p] = v);
        }
        Ok(out)
    }
}

/// Mean GError of a configuration over a population, with per-instance samples.
#[derive(Debug, Clone)]
pub struct GErrorResult {
    pub mean: f64,
    /// `None` for runs that diverged.
    pub samples: Vec<Option<f64>>,
    pub divergent: usize,
}

/// GError under a fixed weight mode; runs are independent and parallel.
pub fn gerror(instances: &[TheoryInstance], s: &NoiseSchedule, cfg: &FusionConfig) -> Result<GErrorResult> {
    gerror_with(instances, s, cfg, |_| Box::new(cfg.weight_mode.clone()))
}

pub fn gerror_with<F>(
    instances: &[TheoryInstance],
    s: &NoiseSchedule,
    cfg: &FusionConfig,
    make_policy: F,
) -> Result<GErrorResult>
where
    F: Fn(&TheoryInstance) -> Box<dyn WeightPolicy> + Sync,
{
    if instances.len() < 2 {
        return Err(Error::InsufficientPopulation {
            need: 2,
            got: instances.len(),
        });
    }
    let samples: Vec<Option<f64>> = instances
        .par_iter()
        .map(|inst| {
            let mut policy = make_policy(inst);
            match crate::sampler::fuse_with(
                &inst.modalities,
                inst.denoiser.as_ref(),
                s,
                cfg,
                policy.as_mut(),
                &mut (),
            ) {
                Ok(out) => out.image.mse(&inst.ideal).map(Some),
                Err(Error::Divergence { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let ok: Vec<f64> = samples.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::InsufficientPopulation { need: 1, got: 0 });
    }
    Ok(GErrorResult {
        mean: ok.iter().sum::<f64>() / ok.len() as f64,
        divergent: samples.len() - ok.len(),
        samples,
    })
}

/// Population result of one weight policy.
#[derive(Debug, Clone)]
pub struct PolicyOutcome {
    pub name: String,
    pub gain: f64,
    pub mix: f64,
    pub ledgers: Vec<RunLedger>,
    pub mean_gerror: f64,
    pub covariance: CovarianceReport,
}

impl PolicyOutcome {
    pub fn gerrors(&self) -> Vec<f64> {
        self.ledgers.iter().map(|l| l.gerror).collect()
    }
}

pub fn evaluate_policy(
    instances: &[TheoryInstance],
    s: &NoiseSchedule,
    cfg: &FusionConfig,
    gain: f64,
    mix: f64,
) -> Result<PolicyOutcome> {
    let ledgers: Vec<RunLedger> = instances
        .par_iter()
        .map(|inst| {
            let mut policy = GainPolicy::new(gain, mix, inst.seed);
            run_with_ledger(inst, s, cfg, &mut policy).map(|(_, l)| l)
        })
        .collect::<Result<_>>()?;
    let covariance = covariance_report(&ledgers)?;
    let mean_gerror = ledgers.iter().map(|l| l.gerror).sum::<f64>() / ledgers.len() as f64;
    Ok(PolicyOutcome {
        name: policy_name(gain, mix),
        gain,
        mix,
        ledgers,
        mean_gerror,
        covariance,
    })
}

/// Ranks with ties averaged, 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            out[p] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InsufficientPopulation {
            need: 3,
            got: x.len().min(y.len()),
        });
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// One-sided permutation p-value for a negative rank correlation.
pub fn spearman_negative_p(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<(f64, f64)> {
    let rho = spearman(x, y)?;
    let rx = ranks(x);
    let mut ry = ranks(y);
    let mut rng = RngStream::new(seed).substream("permutation", 0);
    let mut hits = 0usize;
    for _ in 0..permutations {
        rng.shuffle(&mut ry);
        if pearson(&rx, &ry) <= rho {
            hits += 1;
        }
    }
    Ok((rho, (hits + 1) as f64 / (permutations + 1) as f64))
}

/// `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(wins: usize, n: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    if wins > n {
        return 0.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0; // ln C(n, 0)
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= wins {
            terms.push(ln_choose + ln_half_n);
        }
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        .exp()
        .min(1.0)
}

/// Paired one-sided sign test that `better` is smaller than `worse`.
/// Returns `(wins, non-tied pairs, p)`.
pub fn sign_test(better: &[f64], worse: &[f64]) -> Result<(usize, usize, f64)> {
    if better.len() != worse.len() {
        return Err(Error::validation("samples", "paired samples differ in length"));
    }
    let mut wins = 0;
    let mut n = 0;
    for (b, w) in better.iter().zip(worse) {
        if b != w {
            n += 1;
            if b < w {
                wins += 1;
            }
        }
    }
    Ok((wins, n, binomial_upper_tail(wins, n)))
}

/// Parameters of the mechanism validation suite.
#[derive(Debug, Clone)]
pub struct TheorySuite {
    pub kind: InstanceKind,
    pub size: usize,
    pub instances: usize,
    pub gains: Vec<f64>,
    pub mixes: Vec<f64>,
    pub permutations: usize,
    pub seed: u64,
    pub fusion: FusionConfig,
}

impl Default for TheorySuite {
    fn default() -> Self {
        TheorySuite {
            kind: InstanceKind::MaskedComplement,
            size: 16,
            instances: 100,
            gains: vec![-4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
            mixes: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            permutations: 10_000,
            seed: 0,
            fusion: FusionConfig::default(),
        }
    }
}

impl TheorySuite {
    /// `(gain, mix)` for every policy: the full grid plus pure random weights.
    pub fn policies(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .mixes
            .iter()
            .flat_map(|&m| self.gains.iter().map(move |&g| (g, m)))
            .collect();
        out.push((0.0, 1.0));
        out
    }

    pub fn make_instances(&self) -> Result<Vec<TheoryInstance>> {
        let (h, w) = if self.kind == InstanceKind::Gaussian1d {
            (1, 1)
        } else {
            (self.size, self.size)
        };
        (0..self.instances as u64)
            .map(|i| make_instance(self.kind, h, w, 1, self.seed.wrapping_add(i)))
            .collect()
    }
}

/// Outcome of the mechanism checks.
#[derive(Debug, Clone)]
pub struct TheoryOutcome {
    pub policies: Vec<PolicyOutcome>,
    pub rho: f64,
    pub rho_p: f64,
    pub sign_wins: usize,
    pub sign_n: usize,
    pub sign_p: f64,
    pub dynamic_mean: f64,
    pub static_mean: f64,
    pub anti_mean: f64,
}

impl TheoryOutcome {
    pub fn covariance_mechanism(&self) -> bool {
        self.rho < 0.0 && self.rho_p < 0.05
    }

    pub fn dynamic_beats_static(&self) -> bool {
        self.dynamic_mean < self.static_mean && self.sign_p < 0.05
    }

    pub fn anti_dig_dominance(&self) -> bool {
        self.anti_mean >= self.dynamic_mean
    }

    fn find(&self, name: &str) -> Option<&PolicyOutcome> {
        self.policies.iter().find(|p| p.name == name)
    }

    pub fn summary(&self) -> String {
        let verdict = |b: bool| if b { "PASS" } else { "FAIL" };
        let mut out = String::new();
        let _ = writeln!(out, "#schema=dig2dig.theory-summary.v1");
        let _ = writeln!(out, "policies: {}", self.policies.len());
        let _ = writeln!(
            out,
            "instances: {}",
            self.policies.first().map(|p| p.ledgers.len()).unwrap_or(0)
        );
        let _ = writeln!(
            out,
            "spearman(covariance-sum, gerror): {:.6} (permutation p = {:.3e})",
            self.rho, self.rho_p
        );
        let _ = writeln!(
            out,
            "mean gerror dynamic / static-equal / anti-dig: {:.6e} / {:.6e} / {:.6e}",
            self.dynamic_mean, self.static_mean, self.anti_mean
        );
        let _ = writeln!(
            out,
            "sign test dynamic < static-equal: {}/{} (p = {:.3e})",
            self.sign_wins, self.sign_n, self.sign_p
        );
        if let Some(d) = self.find("dynamic") {
            let c0: f64 = d.ledgers.iter().map(|l| l.zeta_start).sum::<f64>() / d.ledgers.len() as f64;
            let g: f64 = d
                .ledgers
                .iter()
                .map(|l| l.steps.iter().map(|s| s.g_term).sum::<f64>())
                .sum::<f64>()
                / d.ledgers.len() as f64;
            let sm: f64 = d
                .ledgers
                .iter()
                .map(|l| l.steps.iter().map(|s| s.delta * s.delta).sum::<f64>() * LOSS_SMOOTHNESS / 2.0)
                .sum::<f64>()
                / d.ledgers.len() as f64;
            let noise: f64 = d
                .ledgers
                .iter()
                .map(|l| l.steps.iter().map(|s| s.noise_term).sum::<f64>())
                .sum::<f64>()
                / d.ledgers.len() as f64;
            let _ = writeln!(
                out,
                "constant bucket (dynamic, not bounded): zeta(x_T) {c0:.6e}, sum G {g:.6e}, sum (L/2) delta^2 {sm:.6e}, L = {LOSS_SMOOTHNESS}"
            );
            let _ = writeln!(
                out,
                "measured noise term mean (reported, not asserted zero): {noise:.6e}"
            );
        }
        let _ = writeln!(out, "dynamic-beats-static: {}", verdict(self.dynamic_beats_static()));
        let _ = writeln!(out, "covariance-mechanism: {}", verdict(self.covariance_mechanism()));
        let _ = writeln!(out, "anti-DIG-dominance: {}", verdict(self.anti_dig_dominance()));
        out
    }

    /// Per-step ledger rows for the dynamic, static-equal and anti-DIG policies.
    pub fn ledger_csv(&self) -> String {
        let mut out = String::from(
            "#schema=dig2dig.ledger.v1\npolicy,seed,t,k,A,coef,v_norm,B,cos_theta,grad_norm,degenerate,weight,zeta,G,guidance_term,noise_term,delta,gerror\n",
        );
        for name in ["dynamic", "static-equal", "anti-dig"] {
            let Some(p) = self.find(name) else { continue };
            for l in &p.ledgers {
                for s in &l.steps {
                    for (k, m) in s.modalities.iter().enumerate() {
                        let _ = writeln!(
                            out,
                            "{name},{},{},{k},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                            l.seed,
                            s.source_t,
                            s.a(),
                            s.coef,
                            s.v_norm,
                            m.alignment.b,
                            m.alignment.cos_theta,
                            m.alignment.norm_grad,
                            m.alignment.degenerate as u8,
                            m.weight_mean,
                            s.zeta,
                            s.g_term,
                            s.guidance_term,
                            s.noise_term,
                            s.delta,
                            l.gerror
                        );
                    }
                }
            }
        }
        out
    }

    pub fn covariance_csv(&self) -> String {
        let mut out = String::from(
            "#schema=dig2dig.covariance.v1\npolicy,gain,mix,t,k,A,cov,mean_weight,mean_B,weighted_sum,mean_gerror\n",
        );
        for p in &self.policies {
            for r in &p.covariance.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                    p.name,
                    p.gain,
                    p.mix,
                    r.source_t,
                    r.k,
                    r.a,
                    r.cov,
                    r.mean_weight,
                    r.mean_b,
                    p.covariance.weighted_sum,
                    p.mean_gerror
                );
            }
        }
        out
    }
}

/// Runs every policy over the instance population and applies the checks.
pub fn run_suite(suite: &TheorySuite, s: &NoiseSchedule) -> Result<TheoryOutcome> {
    let instances = suite.make_instances()?;
    let mut cfg = suite.fusion.clone();
    cfg.weight_mode = WeightMode::Dynamic;
    let policies: Vec<PolicyOutcome> = suite
        .policies()
        .into_iter()
        .map(|(g, m)| evaluate_policy(&instances, s, &cfg, g, m))
        .collect::<Result<_>>()?;
    let sums: Vec<f64> = policies.iter().map(|p| p.covariance.weighted_sum).collect();
    let means: Vec<f64> = policies.iter().map(|p| p.mean_gerror).collect();
    let (rho, rho_p) = spearman_negative_p(&sums, &means, suite.permutations, suite.seed)?;
    let get = |name: &str| -> Result<&PolicyOutcome> {
        policies
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("policy grid lacks `{name}`")))
    };
    let (dynamic, stat, anti) = (get("dynamic")?, get("static-equal")?, get("anti-dig")?);
    let (sign_wins, sign_n, sign_p) = sign_test(&dynamic.gerrors(), &stat.gerrors())?;
    let (dynamic_mean, static_mean, anti_mean) = (dynamic.mean_gerror, stat.mean_gerror, anti.mean_gerror);
    Ok(TheoryOutcome {
        policies,
        rho,
        rho_p,
        sign_wins,
        sign_n,
        sign_p,
        dynamic_mean,
        static_mean,
        anti_mean,
    })
}

/// Region/texture pair: modality A holds a smooth bump inside a central square
/// region R, modality B holds fine texture outside R. Returns the stack and
/// the per-pixel membership of R.
pub fn structure_texture_pair(size: usize, seed: u64) -> Result<(ModalityStack, Vec<bool>)> {
    let mut rng = RngStream::new(seed).substream("structure-texture", 0);
    let lo = size / 4;
    let hi = size - size / 4;
    let inside: Vec<bool> = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            (lo..hi).contains(&y) && (lo..hi).contains(&x)
        })
        .collect();
    let centre = size as f64 / 2.0 + (rng.uniform() - 0.5);
    let radius = (hi - lo) as f64 / 2.0;
    let amp = 0.7 + 0.2 * rng.uniform();
    let a = ImageTensor::from_fn(size, size, 1, |y, x, _| {
        if !inside[y * size + x] {
            return 0.0;
        }
        let d2 = (y as f64 + 0.5 - centre).powi(2) + (x as f64 + 0.5 - centre).powi(2);
        amp * (-d2 / (2.0 * (radius / 1.5).powi(2))).exp()
    });
    let phase = 2.0 * std::f64::consts::PI * rng.uniform();
    let tex = rng.normal_tensor(size, size, 1);
    let b = ImageTensor::from_fn(size, size, 1, |y, x, _| {
        if inside[y * size + x] {
            return 0.0;
        }
        let stripes = (std::f64::consts::PI * 0.9 * (x + y) as f64 + phase).cos();
        0.25 * stripes + 0.1 * tex.get(y, x, 0)
    });
    let ms = ModalityStack::new(vec![a, b], vec!["structure".into(), "texture".into()])?;
    Ok((ms, inside))
}

/// Record index at which a cumulative curve first reaches half its final value.
pub fn half_crossing(curve: &[f64]) -> Option<usize> {
    let last = *curve.last()?;
    if last <= 0.0 {
        return None;
    }
    curve.iter().position(|&v| v >= 0.5 * last)
}

/// Mean cumulative gain per record over the patches selected by `mask`.
pub fn region_curve(trace: &crate::dig::DigTrace, k: usize, patch_mask: &[bool]) -> Vec<f64> {
    let count = patch_mask.iter().filter(|&&m| m).count().max(1) as f64;
    trace
        .records
        .iter()
        .map(|r| {
            r.cum_dig[k]
                .iter()
                .zip(patch_mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum::<f64>()
                / count
        })
        .collect()
}

/// Softmax with temperature, re-exported for callers building custom policies.
pub fn tempered(values: &[f64], temperature: f64) -> Vec<f64> {
    softmax_weights(values, temperature)
}

/// Dig configuration used by the structure/texture crossing experiment.
pub fn crossing_dig_config() -> DigConfig {
    DigConfig {
        interval: 1,
        ..DigConfig::default()
    }
}

/// Half-crossing record indices `(A inside R, B outside R)` for one seed of
/// the structure/texture pair, using `steps` reverse steps.
pub fn crossing_indices(
    size: usize,
    steps: usize,
    seed: u64,
    s: &NoiseSchedule,
) -> Result<(Option<usize>, Option<usize>)> {
    let (ms, inside) = structure_texture_pair(size, seed)?;
    let prior = bench_prior(size, size, 1)?;
    let cfg = FusionConfig {
        total_steps: steps,
        dig: crossing_dig_config(),
        seed,
        ..FusionConfig::default()
    };
    let trace = crate::sampler::gain_trace(&ms, &prior, s, &cfg)?;
    let l = trace.layout;
    let mask: Vec<bool> = (0..l.patches())
        .map(|p| {
            let (r, c) = (p / l.cols, p % l.cols);
            inside[(r * l.patch_h + l.patch_h / 2) * size + c * l.patch_w + l.patch_w / 2]
        })
        .collect();
    let outside: Vec<bool> = mask.iter().map(|m| !m).collect();
    Ok((
        half_crossing(&region_curve(&trace, 0, &mask)),
        half_crossing(&region_curve(&trace, 1, &outside)),
    ))
}

/// Structure saturates first: A's crossing strictly precedes B's.
pub fn crossing_holds(indices: (Option<usize>, Option<usize>)) -> bool {
    matches!(indices, (Some(a), Some(b)) if a < b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn full_mask_gives_identity_modality() {
        let g = RngStream::new(1).normal_tensor(4, 4, 1);
        let f = ImageTensor::zeros(4, 4, 1);
        let (c1, c2) = masked_complement_from(&g, &[1.0; 16], &f).unwrap();
        assert_eq!(c1, g);
        assert_eq!(c2, f);
    }

    #[test]
    fn instances_are_deterministic() {
        for kind in [InstanceKind::MaskedComplement, InstanceKind::Blended] {
            let a = make_instance(kind, 16, 16, 1, 7).unwrap();
            let b = make_instance(kind, 16, 16, 1, 7).unwrap();
            assert_eq!(a.ideal, b.ideal);
            assert_eq!(a.modalities.images(), b.modalities.images());
        }
        let s = make_instance(InstanceKind::Gaussian1d, 1, 1, 1, 3).unwrap();
        assert_eq!(s.ideal.len(), 1);
    }

    #[test]
    fn ideal_direction_sign() {
        let x = ImageTensor::scalar(0.5);
        let ideal = ImageTensor::scalar(2.0);
        let v = ideal_direction(&x, &ideal).unwrap();
        assert_eq!(v.data()[0], 3.0);
        // finite-difference derivative of (x - ideal)^2
        let h = 1e-6;
        let fd = ((0.5 + h - 2.0f64).powi(2) - (0.5 - h - 2.0f64).powi(2)) / (2.0 * h);
        assert!((-fd - 3.0).abs() < 1e-8);
    }

    #[test]
    fn alignment_parallel_orthogonal_degenerate() {
        let v = ImageTensor::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        let par = ImageTensor::new(1, 2, 1, vec![3.0, 0.0]).unwrap();
        let a = alignment_from(&v, &par).unwrap();
        assert_eq!((a.cos_theta, a.b), (1.0, 3.0));
        let orth = ImageTensor::new(1, 2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(alignment_from(&v, &orth).unwrap().b, 0.0);
        let zero = ImageTensor::zeros(1, 2, 1);
        assert!(alignment_from(&zero, &par).unwrap().degenerate);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn binomial_tail_small_cases() {
        assert!((binomial_upper_tail(3, 3) - 0.125).abs() < 1e-12);
        assert!((binomial_upper_tail(2, 3) - 0.5).abs() < 1e-12);
        assert_eq!(binomial_upper_tail(0, 5), 1.0);
        // 10 heads out of 10
        assert!((binomial_upper_tail(10, 10) - 1.0 / 1024.0).abs() < 1e-14);
    }

    #[test]
    fn ledger_telescopes_exactly() {
        let s = make_linear_schedule(200, 1e-4, 0.02).unwrap();
        let inst = make_instance(InstanceKind::MaskedComplement, 8, 8, 1, 5).unwrap();
        let cfg = FusionConfig {
            total_steps: 10,
            dig: DigConfig {
                interval: 3,
                patch_grid: crate::dig::PatchGrid::Grid { rows: 2, cols: 2 },
                ..DigConfig::default()
            },
            ..FusionConfig::default()
        };
        let (_, l) = run_with_ledger(&inst, &s, &cfg, &mut WeightMode::Dynamic).unwrap();
        assert_eq!(l.steps.len(), 10);
        let change = l.zeta_end - l.zeta_start;
        assert!((l.telescoped_change() - change).abs() < 1e-9 * (1.0 + change.abs()));
    }
}
