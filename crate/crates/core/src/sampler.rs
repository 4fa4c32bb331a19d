//! The fusion loop: a respaced reverse chain whose multimodal guidance is
//! reweighted from information gains every `S` steps.

use std::str::FromStr;

use crate::denoiser::Denoiser;
use crate::diffusion::{guided_step_terms, StepTerms};
use crate::dig::{evaluate_gains, expand_weights, grid_weights_from_dig, DigConfig, DigTrace, PatchLayout};
use crate::error::{Error, Result};
use crate::guidance::{assemble_guidance, guidance_from_x0, GuidanceWeights, ModalityStack, SIMPLEX_TOL};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, RngStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSpacing {
    Uniform,
    /// Gaps grow like `(i / N)^exponent`: fine steps near `t = 1`, coarse near `T`.
    CoarseToFine {
        exponent: f64,
    },
}

impl FromStr for StepSpacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "uniform" => Ok(StepSpacing::Uniform),
            "coarse_to_fine" => Ok(StepSpacing::CoarseToFine { exponent: 2.0 }),
            other => Err(Error::Config(format!("unknown step spacing `{other}`"))),
        }
    }
}

impl std::fmt::Display for StepSpacing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepSpacing::Uniform => f.write_str("uniform"),
            StepSpacing::CoarseToFine { .. } => f.write_str("coarse_to_fine"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightMode {
    Dynamic,
    StaticEqual,
    StaticFixed(Vec<f64>),
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        if let Some(rest) = norm.strip_prefix("static-fixed=") {
            let w = rest
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("bad static-fixed weights `{rest}`")))?;
            return Ok(WeightMode::StaticFixed(w));
        }
        match norm.as_str() {
            "dynamic" => Ok(WeightMode::Dynamic),
            "static-equal" => Ok(WeightMode::StaticEqual),
            other => Err(Error::Config(format!("unknown weight mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightMode::Dynamic => f.write_str("dynamic"),
            WeightMode::StaticEqual => f.write_str("static-equal"),
            WeightMode::StaticFixed(w) => {
                let parts: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                write!(f, "static-fixed={}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub total_steps: usize,
    pub spacing: StepSpacing,
    pub dig: DigConfig,
    pub guidance_scale: f64,
    pub seed: u64,
    pub weight_mode: WeightMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            total_steps: 25,
            spacing: StepSpacing::CoarseToFine { exponent: 2.0 },
            dig: DigConfig::default(),
            guidance_scale: 1.0,
            seed: 0,
            weight_mode: WeightMode::Dynamic,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, s: &NoiseSchedule, modalities: usize) -> Result<()> {
        if self.total_steps < 2 || self.total_steps > s.len() {
            return Err(Error::validation(
                "steps",
                format!("N = {} must lie in 2..={}", self.total_steps, s.len()),
            ));
        }
        if let StepSpacing::CoarseToFine { exponent } = self.spacing {
            if !(exponent >= 1.0 && exponent.is_finite()) {
                return Err(Error::validation("spacing_exponent", "must be at least 1"));
            }
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::validation("guidance_scale", "must be positive"));
        }
        self.dig.validate()?;
        if let WeightMode::StaticFixed(w) = &self.weight_mode {
            if w.len() != modalities {
                return Err(Error::validation(
                    "weight_mode",
                    format!("{} fixed weights for {modalities} modalities", w.len()),
                ));
            }
            GuidanceWeights::global(0, w.clone())?;
        }
        Ok(())
    }
}

/// Timesteps (ascending, ending at `T`) visited by an `N`-step chain.
pub fn make_step_plan(s: &NoiseSchedule, n: usize, spacing: StepSpacing) -> Result<Vec<usize>> {
    let t = s.len();
    if n < 2 || n > t {
        return Err(Error::validation("steps", format!("N = {n} must lie in 2..={t}")));
    }
    match spacing {
        StepSpacing::Uniform => Ok((1..=n).map(|i| i * t / n).collect()),
        StepSpacing::CoarseToFine { exponent } => {
            if !(exponent >= 1.0 && exponent.is_finite()) {
                return Err(Error::validation("spacing_exponent", "must be at least 1"));
            }
            let ramp = |i: usize| t as f64 * (i as f64 / n as f64).powf(exponent);
            let mut gaps: Vec<usize> = (1..=n)
                .map(|i| ((ramp(i) - ramp(i - 1)).floor() as usize).max(1))
                .collect();
            let mut total: usize = gaps.iter().sum();
            if total < t {
                *gaps.last_mut().unwrap() += t - total;
            }
            while total > t {
                let max = *gaps.iter().max().unwrap();
                let first = gaps.iter().position(|&g| g == max).unwrap();
                gaps[first] -= 1;
                total -= 1;
            }
            let mut acc = 0;
            Ok(gaps
                .into_iter()
                .map(|g| {
                    acc += g;
                    acc
                })
                .collect())
        }
    }
}

/// Inputs to a weight decision at one record.
pub struct WeightContext<'a> {
    /// Step of the respaced chain the weights take effect at.
    pub t: usize,
    pub record: usize,
    pub modalities: usize,
    /// `[k][patch]` gains over the last `S` steps, absent at the first record.
    pub gains: Option<&'a [Vec<f64>]>,
    pub layout: &'a PatchLayout,
    pub dig: &'a DigConfig,
}

/// Chooses `[k][patch]` weights at each record.
pub trait WeightPolicy {
    fn weights(&mut self, ctx: &WeightContext<'_>) -> Result<Vec<Vec<f64>>>;
}

fn constant_grid(values: &[f64], patches: usize) -> Vec<Vec<f64>> {
    values.iter().map(|&w| vec![w; patches]).collect()
}

impl WeightPolicy for WeightMode {
    fn weights(&mut self, ctx: &WeightContext<'_>) -> Result<Vec<Vec<f64>>> {
        let patches = ctx.layout.patches();
        let k = ctx.modalities;
        match self {
            WeightMode::Dynamic => match ctx.gains {
                Some(g) => grid_weights_from_dig(g, ctx.dig),
                None => Ok(constant_grid(&vec![1.0 / k as f64; k], patches)),
            },
            WeightMode::StaticEqual => Ok(constant_grid(&vec![1.0 / k as f64; k], patches)),
            WeightMode::StaticFixed(w) => Ok(constant_grid(w, patches)),
        }
    }
}

/// Everything computed during one reverse step.
pub struct StepInfo<'a> {
    pub t: usize,
    pub schedule: &'a NoiseSchedule,
    pub x_t: &'a ImageTensor,
    pub eps_hat: &'a ImageTensor,
    pub x0_hat: &'a ImageTensor,
    /// Unweighted per-modality guidance gradients.
    pub grads: &'a [ImageTensor],
    pub weights: &'a GuidanceWeights,
    pub terms: &'a StepTerms,
    pub x_next: &'a ImageTensor,
}

pub trait StepObserver {
    fn on_step(&mut self, info: &StepInfo<'_>) -> Result<()>;
}

impl StepObserver for () {
    fn on_step(&mut self, _: &StepInfo<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub image: ImageTensor,
    pub trace: DigTrace,
    pub plan: Vec<usize>,
}

/// Runs the fusion chain with the configured weight mode.
pub fn fuse(ms: &ModalityStack, d: &dyn Denoiser, s: &NoiseSchedule, cfg: &FusionConfig) -> Result<FusionOutput> {
    let mut policy = cfg.weight_mode.clone();
    fuse_with(ms, d, s, cfg, &mut policy, &mut ())
}

fn record_steps(n: usize, interval: usize) -> impl Iterator<Item = usize> {
    (0..n).step_by(interval)
}

fn record_gains(
    ms: &ModalityStack,
    d: &dyn Denoiser,
    sub: &NoiseSchedule,
    cfg: &FusionConfig,
    layout: &PatchLayout,
    root: &RngStream,
    t: usize,
) -> Result<Option<Vec<Vec<f64>>>> {
    let hi = t + cfg.dig.interval;
    if hi > sub.len() {
        return Ok(None);
    }
    let mut rng = root.substream("dig", t as u64);
    evaluate_gains(ms, hi, t, d, sub, &cfg.dig, layout, &mut rng).map(Some)
}

/// [`fuse`] with a custom weight policy and a per-step observer.
pub fn fuse_with(
    ms: &ModalityStack,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    cfg: &FusionConfig,
    policy: &mut dyn WeightPolicy,
    observer: &mut dyn StepObserver,
) -> Result<FusionOutput> {
    cfg.validate(s, ms.len())?;
    let n = cfg.total_steps;
    let plan = make_step_plan(s, n, cfg.spacing)?;
    let sub = s.sub_schedule(&plan)?;
    let (h, w, c) = ms.shape();
    let k = ms.len();
    let layout = PatchLayout::new(cfg.dig.patch_grid, h, w)?;
    let root = RngStream::new(cfg.seed);
    let mut traj = root.substream("trajectory", 0);
    let mut x = traj.normal_tensor(h, w, c);
    let mut trace = DigTrace::new(ms.names().to_vec(), layout);
    let mut weights = GuidanceWeights::equal(n, k);
    let mut next_record = record_steps(n, cfg.dig.interval).peekable();

    for j in 0..n {
        let t = n - j;
        if next_record.peek() == Some(&j) {
            next_record.next();
            let gains = record_gains(ms, d, &sub, cfg, &layout, &root, t)?;
            let grid = policy.weights(&WeightContext {
                t,
                record: trace.len(),
                modalities: k,
                gains: gains.as_deref(),
                layout: &layout,
                dig: &cfg.dig,
            })?;
            check_grid(&grid, k, layout.patches())?;
            weights = expand_weights(t, &grid, &layout)?;
            let dig = gains.unwrap_or_else(|| vec![vec![0.0; layout.patches()]; k]);
            trace.push(t, sub.source_step(t), dig, grid);
        }
        weights.t = t;

        let (eps, x0) = match d.predict(&x, t, &sub) {
            Ok(p) => p,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { t: sub.source_step(t) }),
            Err(e) => return Err(e),
        };
        if !(eps.all_finite() && x0.all_finite()) {
            return Err(Error::Divergence { t: sub.source_step(t) });
        }
        let grads = ms
            .images()
            .iter()
            .map(|c_k| guidance_from_x0(c_k, &x0, t, &sub))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence { t: sub.source_step(t) },
                other => other,
            })?;
        let guidance = assemble_guidance(ms, &weights, &grads)?.scale(cfg.guidance_scale);
        // drawn at every step, including the last, so the stream stays aligned
        let z = traj.normal_like(&x);
        let terms = guided_step_terms(&x, t, &eps, &guidance, &z, &sub)?;
        let x_next = terms.total()?;
        if !x_next.all_finite() {
            return Err(Error::Divergence { t: sub.source_step(t) });
        }
        observer.on_step(&StepInfo {
            t,
            schedule: &sub,
            x_t: &x,
            eps_hat: &eps,
            x0_hat: &x0,
            grads: &grads,
            weights: &weights,
            terms: &terms,
            x_next: &x_next,
        })?;
        x = x_next;
    }
    Ok(FusionOutput { image: x, trace, plan })
}

fn check_grid(grid: &[Vec<f64>], k: usize, patches: usize) -> Result<()> {
    if grid.len() != k || grid.iter().any(|g| g.len() != patches) {
        return Err(Error::validation("weights", "policy returned a malformed weight grid"));
    }
    for p in 0..patches {
        let sum: f64 = grid.iter().map(|g| g[p]).sum();
        if grid.iter().any(|g| g[p].is_nan() || g[p] < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::validation(
                "weights",
                format!("patch {p} weights off the simplex"),
            ));
        }
    }
    Ok(())
}

/// Gain records of a fusion run without running the chain. Gains do not
/// depend on the trajectory, so the `dig` and `cum_dig` columns match those
/// of [`fuse`] with the same configuration; weights are the dynamic ones.
pub fn gain_trace(ms: &ModalityStack, d: &dyn Denoiser, s: &NoiseSchedule, cfg: &FusionConfig) -> Result<DigTrace> {
    cfg.validate(s, ms.len())?;
    let n = cfg.total_steps;
    let plan = make_step_plan(s, n, cfg.spacing)?;
    let sub = s.sub_schedule(&plan)?;
    let (h, w, _) = ms.shape();
    let k = ms.len();
    let layout = PatchLayout::new(cfg.dig.patch_grid, h, w)?;
    let root = RngStream::new(cfg.seed);
    let mut trace = DigTrace::new(ms.names().to_vec(), layout);
    let mut policy = WeightMode::Dynamic;
    for j in record_steps(n, cfg.dig.interval) {
        let t = n - j;
        let gains = record_gains(ms, d, &sub, cfg, &layout, &root, t)?;
        let grid = policy.weights(&WeightContext {
            t,
            record: trace.len(),
            modalities: k,
            gains: gains.as_deref(),
            layout: &layout,
            dig: &cfg.dig,
        })?;
        let dig = gains.unwrap_or_else(|| vec![vec![0.0; layout.patches()]; k]);
        trace.push(t, sub.source_step(t), dig, grid);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{EmpiricalDataOracle, GaussianDataOracle};
    use crate::dig::PatchGrid;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn uniform_plans() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        assert_eq!(
            make_step_plan(&s, 4, StepSpacing::Uniform).unwrap(),
            vec![25, 50, 75, 100]
        );
        let all = make_step_plan(&s, 100, StepSpacing::Uniform).unwrap();
        assert_eq!(all, (1..=100).collect::<Vec<_>>());
        assert!(make_step_plan(&s, 1, StepSpacing::Uniform).is_err());
        assert!(make_step_plan(&s, 101, StepSpacing::Uniform).is_err());
    }

    #[test]
    fn coarse_to_fine_gaps_grow() {
        let s = NoiseSchedule::default();
        for n in [2, 5, 15, 25, 100, 700, 1000] {
            let plan = make_step_plan(&s, n, StepSpacing::CoarseToFine { exponent: 2.0 }).unwrap();
            assert_eq!(plan.len(), n);
            assert_eq!(*plan.last().unwrap(), 1000);
            let mut prev = 0;
            let mut gaps = Vec::new();
            for &t in &plan {
                assert!(t > prev);
                gaps.push(t - prev);
                prev = t;
            }
            assert!(gaps.windows(2).all(|w| w[0] <= w[1]), "n={n} {gaps:?}");
            if n < 1000 {
                assert!(gaps[0] < *gaps.last().unwrap());
            }
        }
    }

    #[test]
    fn weight_mode_parsing() {
        assert_eq!("dynamic".parse::<WeightMode>().unwrap(), WeightMode::Dynamic);
        assert_eq!("static_equal".parse::<WeightMode>().unwrap(), WeightMode::StaticEqual);
        assert_eq!(
            "static-fixed=0.25,0.75".parse::<WeightMode>().unwrap(),
            WeightMode::StaticFixed(vec![0.25, 0.75])
        );
        assert!("static-fixed=a".parse::<WeightMode>().is_err());
    }

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            total_steps: 12,
            dig: DigConfig {
                interval: 4,
                patch_grid: PatchGrid::Grid { rows: 2, cols: 2 },
                ..DigConfig::default()
            },
            seed: 11,
            ..FusionConfig::default()
        }
    }

    #[test]
    fn trace_count_and_static_weights() {
        let s = make_linear_schedule(200, 1e-4, 0.02).unwrap();
        let mut r = RngStream::new(1);
        let ms = ModalityStack::unnamed(vec![r.normal_tensor(8, 8, 1), r.normal_tensor(8, 8, 1)]).unwrap();
        let o = GaussianDataOracle::new(ImageTensor::zeros(8, 8, 1), 0.5).unwrap();
        let mut cfg = small_cfg();
        let out = fuse(&ms, &o, &s, &cfg).unwrap();
        assert_eq!(out.trace.len(), 3);
        cfg.total_steps = 13;
        assert_eq!(fuse(&ms, &o, &s, &cfg).unwrap().trace.len(), 4);
        cfg.weight_mode = WeightMode::StaticEqual;
        let out = fuse(&ms, &o, &s, &cfg).unwrap();
        assert!(out
            .trace
            .records
            .iter()
            .flat_map(|r| r.weights.iter().flatten())
            .all(|&w| w == 0.5));
    }

    #[test]
    fn identical_modalities_dynamic_equals_static() {
        let s = make_linear_schedule(200, 1e-4, 0.02).unwrap();
        let c = RngStream::new(2).normal_tensor(8, 8, 1).scale(0.5);
        let ms = ModalityStack::unnamed(vec![c.clone(), c.clone()]).unwrap();
        let o = GaussianDataOracle::new(ImageTensor::zeros(8, 8, 1), 0.3).unwrap();
        let mut cfg = small_cfg();
        let a = fuse(&ms, &o, &s, &cfg).unwrap();
        cfg.weight_mode = WeightMode::StaticEqual;
        let b = fuse(&ms, &o, &s, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        let single = ModalityStack::unnamed(vec![c]).unwrap();
        cfg.weight_mode = WeightMode::Dynamic;
        assert_eq!(fuse(&single, &o, &s, &cfg).unwrap().image, a.image);
    }

    #[test]
    fn self_reconstruction() {
        let s = make_linear_schedule(200, 1e-4, 0.02).unwrap();
        let c = RngStream::new(3).normal_tensor(6, 6, 1).scale(0.4);
        let ms = ModalityStack::unnamed(vec![c.clone()]).unwrap();
        let o = EmpiricalDataOracle::new(vec![c.clone()]).unwrap();
        let out = fuse(&ms, &o, &s, &small_cfg()).unwrap();
        assert!(out.image.max_abs_diff(&c).unwrap() < 1e-3);
    }

    #[test]
    fn gain_trace_matches_fusion_trace() {
        let s = make_linear_schedule(200, 1e-4, 0.02).unwrap();
        let mut r = RngStream::new(4);
        let ms = ModalityStack::unnamed(vec![r.normal_tensor(8, 8, 1), r.normal_tensor(8, 8, 1)]).unwrap();
        let o = GaussianDataOracle::new(ImageTensor::zeros(8, 8, 1), 0.5).unwrap();
        let cfg = small_cfg();
        assert_eq!(
            gain_trace(&ms, &o, &s, &cfg).unwrap(),
            fuse(&ms, &o, &s, &cfg).unwrap().trace
        );
    }

    #[test]
    fn config_rejections() {
        let s = make_linear_schedule(50, 1e-4, 0.02).unwrap();
        let mut cfg = FusionConfig::default();
        assert!(cfg.validate(&s, 2).is_ok());
        cfg.total_steps = 51;
        assert!(cfg.validate(&s, 2).is_err());
        cfg.total_steps = 25;
        cfg.weight_mode = WeightMode::StaticFixed(vec![0.5, 0.6]);
        assert!(cfg.validate(&s, 2).is_err());
        cfg.weight_mode = WeightMode::StaticFixed(vec![1.0]);
        assert!(cfg.validate(&s, 2).is_err());
        cfg.weight_mode = WeightMode::Dynamic;
        cfg.guidance_scale = 0.0;
        assert!(cfg.validate(&s, 2).is_err());
    }
}
