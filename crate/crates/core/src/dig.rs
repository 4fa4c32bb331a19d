//! Diffusion information gains: how much closer a modality's one-step
//! reconstruction gets to the clean modality between two noise levels.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::denoiser::Denoiser;
use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::guidance::{upsample_bilinear, GuidanceWeights, ModalityStack};
use crate::metrics::ssim_map;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, RngStream};

/// Model-space dynamic range used by the SSIM distance.
const MODEL_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    L1,
    L2,
    Ssim,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Distance::L1),
            "l2" => Ok(Distance::L2),
            "ssim" => Ok(Distance::Ssim),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distance::L1 => "l1",
            Distance::L2 => "l2",
            Distance::Ssim => "ssim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchGrid {
    Global,
    Grid { rows: usize, cols: usize },
}

impl FromStr for PatchGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("global") {
            return Ok(PatchGrid::Global);
        }
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("patch grid `{s}` is not RxC or global")))?;
        let rows: usize = r
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad rows in `{s}`")))?;
        let cols: usize = c
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad cols in `{s}`")))?;
        if rows == 0 || cols == 0 {
            return Err(Error::Config("patch grid dimensions must be positive".into()));
        }
        Ok(PatchGrid::Grid { rows, cols })
    }
}

impl std::fmt::Display for PatchGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PatchGrid::Global => f.write_str("global"),
            PatchGrid::Grid { rows, cols } => write!(f, "{rows}x{cols}"),
        }
    }
}

/// Whether both endpoints of one gain evaluation see the same noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSharing {
    Shared,
    Independent,
}

impl FromStr for NoiseSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" => Ok(NoiseSharing::Shared),
            "independent" => Ok(NoiseSharing::Independent),
            other => Err(Error::Config(format!("unknown noise sharing `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseSharing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseSharing::Shared => "shared",
            NoiseSharing::Independent => "independent",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigConfig {
    pub distance: Distance,
    /// Steps between gain evaluations, and the span each evaluation covers.
    pub interval: usize,
    pub patch_grid: PatchGrid,
    pub temperature: f64,
    /// Divide gains by their cross-modality standard deviation before the softmax.
    pub autoscale: bool,
    pub noise: NoiseSharing,
}

impl Default for DigConfig {
    fn default() -> Self {
        DigConfig {
            distance: Distance::L2,
            interval: 10,
            patch_grid: PatchGrid::Grid { rows: 8, cols: 8 },
            temperature: 1.0,
            autoscale: false,
            noise: NoiseSharing::Shared,
        }
    }
}

impl DigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::validation("dig_interval", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::validation("temperature", "must be positive"));
        }
        Ok(())
    }
}

/// Pixel-to-patch geometry. Patches are `ceil(H / rows) x ceil(W / cols)`;
/// patches hanging over the border read edge-replicated pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchLayout {
    pub fn new(grid: PatchGrid, height: usize, width: usize) -> Result<Self> {
        match grid {
            PatchGrid::Global => Ok(PatchLayout {
                rows: 1,
                cols: 1,
                patch_h: height,
                patch_w: width,
                height,
                width,
            }),
            PatchGrid::Grid { rows, cols } => {
                if rows > height || cols > width {
                    return Err(Error::validation(
                        "patch_grid",
                        format!("{rows}x{cols} grid is finer than the {height}x{width} image"),
                    ));
                }
                Ok(PatchLayout {
                    rows,
                    cols,
                    patch_h: height.div_ceil(rows),
                    patch_w: width.div_ceil(cols),
                    height,
                    width,
                })
            }
        }
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_global(&self) -> bool {
        self.rows == 1 && self.cols == 1 && self.patch_h == self.height && self.patch_w == self.width
    }

    /// Mean of a per-pixel field over each (edge-padded) patch.
    pub fn pool(&self, field: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.patches());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let mut acc = 0.0;
                for py in 0..self.patch_h {
                    let y = (r * self.patch_h + py).min(self.height - 1);
                    for px in 0..self.patch_w {
                        let x = (c * self.patch_w + px).min(self.width - 1);
                        acc += field[y * self.width + x];
                    }
                }
                out.push(acc / (self.patch_h * self.patch_w) as f64);
            }
        }
        out
    }

    /// Patch-grid values to a per-pixel map.
    pub fn upsample(&self, grid: &[f64]) -> Vec<f64> {
        if self.is_global() {
            return vec![grid[0]; self.height * self.width];
        }
        upsample_bilinear(
            grid,
            self.rows,
            self.cols,
            self.patch_h,
            self.patch_w,
            self.height,
            self.width,
        )
    }

    /// Patch index containing pixel `(y, x)`.
    pub fn patch_of(&self, y: usize, x: usize) -> usize {
        (y / self.patch_h) * self.cols + x / self.patch_w
    }
}

/// Noised modality `c_k^t`; `t = 0` returns the clean image.
pub fn noisy_modality(c_k: &ImageTensor, t: usize, eps: &ImageTensor, s: &NoiseSchedule) -> Result<ImageTensor> {
    if t == 0 {
        c_k.ensure_same_shape(eps)?;
        return Ok(c_k.clone());
    }
    forward_sample(c_k, t, eps, s)
}

/// One-step reconstruction `c_hat_k^t` of a noised modality.
/// At `t = 0` there is no noise to remove and the input is returned.
pub fn one_step_denoised(c_k_t: &ImageTensor, t: usize, d: &dyn Denoiser, s: &NoiseSchedule) -> Result<ImageTensor> {
    if t == 0 {
        return Ok(c_k_t.clone());
    }
    d.predict(c_k_t, t, s).map(|(_, x0)| x0)
}

/// Per-patch distance between two images.
pub fn patch_distance(a: &ImageTensor, b: &ImageTensor, distance: Distance, layout: &PatchLayout) -> Result<Vec<f64>> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.shape();
    let mut field = vec![0.0; h * w];
    match distance {
        Distance::L1 | Distance::L2 => {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let d = a.get(y, x, ch) - b.get(y, x, ch);
                        acc += if distance == Distance::L1 { d.abs() } else { d * d };
                    }
                    field[y * w + x] = acc / c as f64;
                }
            }
        }
        Distance::Ssim => {
            for ch in 0..c {
                let pa = a.channel(ch);
                let pb = b.channel(ch);
                let map = ssim_map(pa.data(), pb.data(), h, w, MODEL_RANGE);
                for (f, m) in field.iter_mut().zip(map) {
                    *f += (1.0 - m) / c as f64;
                }
            }
        }
    }
    Ok(layout.pool(&field))
}

/// Gain of one modality between `t_hi` and `t_lo < t_hi`, given the noise
/// used to corrupt the modality at each endpoint.
#[allow(clippy::too_many_arguments)]
pub fn dig_with_noise(
    c_k: &ImageTensor,
    t_hi: usize,
    t_lo: usize,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    distance: Distance,
    layout: &PatchLayout,
    eps_hi: &ImageTensor,
    eps_lo: &ImageTensor,
) -> Result<Vec<f64>> {
    if t_lo >= t_hi || t_hi > s.len() {
        return Err(Error::validation(
            "t",
            format!("invalid gain window {t_hi} -> {t_lo} for T = {}", s.len()),
        ));
    }
    let hi = one_step_denoised(&noisy_modality(c_k, t_hi, eps_hi, s)?, t_hi, d, s)?;
    let lo = one_step_denoised(&noisy_modality(c_k, t_lo, eps_lo, s)?, t_lo, d, s)?;
    let l_hi = patch_distance(&hi, c_k, distance, layout)?;
    let l_lo = patch_distance(&lo, c_k, distance, layout)?;
    Ok(l_hi.iter().zip(&l_lo).map(|(a, b)| a - b).collect())
}

/// `DIG_k(t)` over the window `t -> t - S`, drawing fresh noise from `rng`.
pub fn dig(
    c_k: &ImageTensor,
    t: usize,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    cfg: &DigConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if t > s.len() || t < cfg.interval {
        return Err(Error::validation(
            "t",
            format!(
                "window {t} -> {} is outside the schedule",
                t as isize - cfg.interval as isize
            ),
        ));
    }
    let (h, w, c) = c_k.shape();
    let layout = PatchLayout::new(cfg.patch_grid, h, w)?;
    let eps_hi = rng.normal_tensor(h, w, c);
    let eps_lo = match cfg.noise {
        NoiseSharing::Shared => eps_hi.clone(),
        NoiseSharing::Independent => rng.normal_tensor(h, w, c),
    };
    dig_with_noise(c_k, t, t - cfg.interval, d, s, cfg.distance, &layout, &eps_hi, &eps_lo)
}

/// Gains for every modality over one window. All modalities see the same
/// noise draw(s), so identical modalities always receive identical gains.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_gains(
    ms: &ModalityStack,
    t_hi: usize,
    t_lo: usize,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    cfg: &DigConfig,
    layout: &PatchLayout,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    let (h, w, c) = ms.shape();
    let eps_hi = rng.normal_tensor(h, w, c);
    let eps_lo = match cfg.noise {
        NoiseSharing::Shared => eps_hi.clone(),
        NoiseSharing::Independent => rng.normal_tensor(h, w, c),
    };
    ms.images()
        .iter()
        .map(|c_k| dig_with_noise(c_k, t_hi, t_lo, d, s, cfg.distance, layout, &eps_hi, &eps_lo))
        .collect()
}

/// Temperature softmax with max-shift.
pub fn softmax_weights(values: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = values.iter().map(|v| v / temperature).collect();
    crate::denoiser::softmax(&scaled)
}

/// Softmax across modalities at every patch. Input and output are `[k][patch]`.
pub fn grid_weights_from_dig(dig_values: &[Vec<f64>], cfg: &DigConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let k = dig_values.len();
    if k == 0 {
        return Err(Error::validation("dig", "no modalities"));
    }
    let patches = dig_values[0].len();
    if dig_values.iter().any(|v| v.len() != patches) {
        return Err(Error::validation("dig", "modalities disagree on patch count"));
    }
    if dig_values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "DIG values" });
    }
    let mut out = vec![vec![0.0; patches]; k];
    let mut column = vec![0.0; k];
    for p in 0..patches {
        for (j, v) in dig_values.iter().enumerate() {
            column[j] = v[p];
        }
        if cfg.autoscale && k > 1 {
            let mean = column.iter().sum::<f64>() / k as f64;
            let sd = (column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
            if sd > 0.0 {
                column.iter_mut().for_each(|v| *v /= sd);
            }
        }
        for (j, w) in softmax_weights(&column, cfg.temperature).into_iter().enumerate() {
            out[j][p] = w;
        }
    }
    Ok(out)
}

/// Patch-grid weights to [`GuidanceWeights`] at image resolution.
pub fn expand_weights(t: usize, grid: &[Vec<f64>], layout: &PatchLayout) -> Result<GuidanceWeights> {
    if layout.is_global() {
        GuidanceWeights::global(t, grid.iter().map(|g| g[0]).collect())
    } else {
        let maps = grid.iter().map(|g| layout.upsample(g)).collect();
        GuidanceWeights::patchwise(t, layout.height, layout.width, maps)
    }
}

/// Softmax weights from gains, upsampled per the layout.
pub fn weights_from_dig(
    t: usize,
    dig_values: &[Vec<f64>],
    cfg: &DigConfig,
    layout: &PatchLayout,
) -> Result<GuidanceWeights> {
    let grid = grid_weights_from_dig(dig_values, cfg)?;
    expand_weights(t, &grid, layout)
}

/// One weight update of a reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DigRecord {
    /// Step index within the (possibly respaced) chain.
    pub step: usize,
    /// Timestep of the full-length schedule.
    pub t: usize,
    /// `[k][patch]` gains; zero when no gain history existed yet.
    pub dig: Vec<Vec<f64>>,
    /// `[k][patch]` weights applied from this record on.
    pub weights: Vec<Vec<f64>>,
    /// `[k][patch]` running sums of `dig`.
    pub cum_dig: Vec<Vec<f64>>,
}

/// Time-ordered gain and weight records for one reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DigTrace {
    pub names: Vec<String>,
    pub layout: PatchLayout,
    pub records: Vec<DigRecord>,
}

impl DigTrace {
    pub fn new(names: Vec<String>, layout: PatchLayout) -> Self {
        DigTrace {
            names,
            layout,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, t: usize, dig: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) {
        let cum_dig = match self.records.last() {
            Some(prev) => prev
                .cum_dig
                .iter()
                .zip(&dig)
                .map(|(c, d)| c.iter().zip(d).map(|(a, b)| a + b).collect())
                .collect(),
            None => dig.clone(),
        };
        self.records.push(DigRecord {
            step,
            t,
            dig,
            weights,
            cum_dig,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns `t,modality,patch_row,patch_col,dig,weight,cum_dig`.
    /// Global layouts report patch coordinates as -1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("#schema=dig2dig.trace.v1\nt,modality,patch_row,patch_col,dig,weight,cum_dig\n");
        let global = self.layout.is_global();
        for r in &self.records {
            for (k, name) in self.names.iter().enumerate() {
                for p in 0..self.layout.patches() {
                    let (pr, pc) = if global {
                        (-1, -1)
                    } else {
                        ((p / self.layout.cols) as i64, (p % self.layout.cols) as i64)
                    };
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{:.17e},{:.17e},{:.17e}",
                        r.t, name, pr, pc, r.dig[k][p], r.weights[k][p], r.cum_dig[k][p]
                    );
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianDataOracle, ZeroDenoiser};
    use crate::schedule::make_linear_schedule;

    /// Returns the noise that produced `x_t` from a known clean image.
    struct ExactNoise {
        clean: ImageTensor,
    }

    impl Denoiser for ExactNoise {
        fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
            let ab = s.alpha_bar(t);
            x_t.zip_map(&self.clean, |x, c| (x - ab.sqrt() * c) / (1.0 - ab).sqrt())
        }
    }

    fn global_cfg(distance: Distance, interval: usize) -> DigConfig {
        DigConfig {
            distance,
            interval,
            patch_grid: PatchGrid::Global,
            ..DigConfig::default()
        }
    }

    #[test]
    fn parse_options() {
        assert_eq!(
            "8x8".parse::<PatchGrid>().unwrap(),
            PatchGrid::Grid { rows: 8, cols: 8 }
        );
        assert_eq!("global".parse::<PatchGrid>().unwrap(), PatchGrid::Global);
        assert!("0x3".parse::<PatchGrid>().is_err());
        assert_eq!("SSIM".parse::<Distance>().unwrap(), Distance::Ssim);
        assert!("l3".parse::<Distance>().is_err());
    }

    #[test]
    fn noisy_modality_contract() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let c = RngStream::new(1).normal_tensor(4, 4, 1);
        let z = ImageTensor::zeros(4, 4, 1);
        assert_eq!(noisy_modality(&c, 30, &z, &s).unwrap(), c.scale(s.alpha_bar(30).sqrt()));
        let eps = RngStream::new(2).normal_tensor(4, 4, 1);
        assert_eq!(
            noisy_modality(&c, 30, &eps, &s).unwrap(),
            noisy_modality(&c, 30, &eps, &s).unwrap()
        );
    }

    #[test]
    fn one_step_denoised_perfect_and_zero() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let c = RngStream::new(3).normal_tensor(4, 4, 1);
        let eps = RngStream::new(4).normal_tensor(4, 4, 1);
        let ct = noisy_modality(&c, 60, &eps, &s).unwrap();
        let perfect = ExactNoise { clean: c.clone() };
        let back = one_step_denoised(&ct, 60, &perfect, &s).unwrap();
        assert!(back.max_abs_diff(&c).unwrap() < 1e-12);
        let zero = one_step_denoised(&ct, 60, &ZeroDenoiser, &s).unwrap();
        assert_eq!(zero, ct.map(|v| v / s.alpha_bar(60).sqrt()));
    }

    #[test]
    fn perfect_denoiser_has_zero_gain() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let c = RngStream::new(5).normal_tensor(8, 8, 1);
        let d = ExactNoise { clean: c.clone() };
        let mut rng = RngStream::new(6);
        for distance in [Distance::L1, Distance::L2, Distance::Ssim] {
            let cfg = DigConfig {
                distance,
                patch_grid: PatchGrid::Grid { rows: 2, cols: 2 },
                ..DigConfig::default()
            };
            let g = dig(&c, 50, &d, &s, &cfg, &mut rng).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-12), "{distance}: {g:?}");
        }
    }

    #[test]
    fn scalar_zero_denoiser_hand_value() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let (t, interval) = (40, 10);
        let c = ImageTensor::scalar(1.0);
        let e = ImageTensor::scalar(0.7);
        let layout = PatchLayout::new(PatchGrid::Global, 1, 1).unwrap();
        let got = dig_with_noise(&c, t, t - interval, &ZeroDenoiser, &s, Distance::L2, &layout, &e, &e).unwrap()[0];
        let rec = |tt: usize| {
            let ab = s.alpha_bar(tt);
            let ct = ab.sqrt() * 1.0 + (1.0 - ab).sqrt() * 0.7;
            (ct / ab.sqrt() - 1.0).powi(2)
        };
        assert!((got - (rec(40) - rec(30))).abs() < 1e-14);
    }

    #[test]
    fn equal_noise_levels_give_zero_mean_gain() {
        // two distinct steps with identical alpha_bar: beta tiny enough to round away
        let mut betas = vec![0.01; 20];
        betas[10] = 1e-18;
        let s = NoiseSchedule::from_betas(betas).unwrap();
        assert_eq!(s.alpha_bar(11), s.alpha_bar(10));
        let o = GaussianDataOracle::new(ImageTensor::zeros(4, 4, 1), 0.5).unwrap();
        let c = RngStream::new(7).normal_tensor(4, 4, 1).scale(0.5);
        let cfg = DigConfig {
            interval: 1,
            noise: NoiseSharing::Independent,
            ..global_cfg(Distance::L2, 1)
        };
        let mut rng = RngStream::new(8);
        let n = 1000;
        let samples: Vec<f64> = (0..n)
            .map(|_| dig(&c, 11, &o, &s, &cfg, &mut rng).unwrap()[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 4.0 * sd / (n as f64).sqrt(), "mean {mean} sd {sd}");
        // shared noise makes the gain exactly zero
        let shared = global_cfg(Distance::L2, 1);
        assert_eq!(dig(&c, 11, &o, &s, &shared, &mut rng).unwrap()[0], 0.0);
    }

    #[test]
    fn unit_interval_gains_telescope() {
        let s = make_linear_schedule(60, 1e-4, 0.05).unwrap();
        let o = GaussianDataOracle::new(ImageTensor::zeros(6, 6, 1), 0.3).unwrap();
        let c = RngStream::new(9).normal_tensor(6, 6, 1).scale(0.6);
        let eps = RngStream::new(10).normal_tensor(6, 6, 1);
        let layout = PatchLayout::new(PatchGrid::Grid { rows: 3, cols: 3 }, 6, 6).unwrap();
        let mut total = [0.0; 9];
        for t in 1..=60 {
            let g = dig_with_noise(&c, t, t - 1, &o, &s, Distance::L2, &layout, &eps, &eps).unwrap();
            total.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let top = one_step_denoised(&noisy_modality(&c, 60, &eps, &s).unwrap(), 60, &o, &s).unwrap();
        let want = patch_distance(&top, &c, Distance::L2, &layout).unwrap();
        for (a, b) in total.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dig_rejects_bad_window() {
        let s = make_linear_schedule(20, 1e-3, 0.02).unwrap();
        let c = ImageTensor::zeros(2, 2, 1);
        let cfg = global_cfg(Distance::L2, 10);
        let mut rng = RngStream::new(0);
        assert!(dig(&c, 5, &ZeroDenoiser, &s, &cfg, &mut rng).is_err());
        assert!(dig(&c, 21, &ZeroDenoiser, &s, &cfg, &mut rng).is_err());
        assert!(dig(&c, 10, &ZeroDenoiser, &s, &cfg, &mut rng).is_ok());
    }

    #[test]
    fn softmax_closed_forms() {
        let cfg = global_cfg(Distance::L2, 1);
        let w = grid_weights_from_dig(&[vec![0.3], vec![0.3], vec![0.3]], &cfg).unwrap();
        assert!(w.iter().all(|v| (v[0] - 1.0 / 3.0).abs() < 1e-15));
        let w = grid_weights_from_dig(&[vec![2f64.ln()], vec![0.0]], &cfg).unwrap();
        assert!((w[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1][0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(grid_weights_from_dig(&[vec![f64::NAN], vec![0.0]], &cfg).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant_and_monotone() {
        let cfg = global_cfg(Distance::L2, 1);
        let base = [vec![0.4, -1.0], vec![0.1, 2.0], vec![-0.3, 0.0]];
        let shifted: Vec<Vec<f64>> = base.iter().map(|v| v.iter().map(|x| x + 3.7).collect()).collect();
        let a = grid_weights_from_dig(&base, &cfg).unwrap();
        let b = grid_weights_from_dig(&shifted, &cfg).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-15);
        }
        let mut prev = 0.0;
        for i in 0..50 {
            let d1 = -2.0 + 0.1 * i as f64;
            let w = grid_weights_from_dig(&[vec![d1], vec![0.5]], &cfg).unwrap();
            assert!(w[0][0] > prev);
            prev = w[0][0];
        }
    }

    #[test]
    fn autoscale_normalizes_magnitude() {
        let cfg = DigConfig {
            autoscale: true,
            ..global_cfg(Distance::L2, 1)
        };
        let small = grid_weights_from_dig(&[vec![1e-4], vec![0.0]], &cfg).unwrap();
        let large = grid_weights_from_dig(&[vec![10.0], vec![0.0]], &cfg).unwrap();
        assert!((small[0][0] - large[0][0]).abs() < 1e-12);
        assert!(small[0][0] > 0.8);
    }

    #[test]
    fn layout_pads_ragged_grids() {
        let l = PatchLayout::new(PatchGrid::Grid { rows: 3, cols: 2 }, 10, 5).unwrap();
        assert_eq!((l.patch_h, l.patch_w), (4, 3));
        let field: Vec<f64> = (0..50).map(|i| (i / 5) as f64).collect(); // value = row
        let pooled = l.pool(&field);
        // last patch row reads rows 8, 9, 9, 9
        assert!((pooled[4] - (8.0 + 9.0 * 3.0) / 4.0).abs() < 1e-12);
        assert!(PatchLayout::new(PatchGrid::Grid { rows: 11, cols: 1 }, 10, 5).is_err());
    }

    #[test]
    fn trace_cumulates_and_serializes() {
        let layout = PatchLayout::new(PatchGrid::Global, 4, 4).unwrap();
        let mut tr = DigTrace::new(vec!["a".into(), "b".into()], layout);
        tr.push(25, 1000, vec![vec![0.0], vec![0.0]], vec![vec![0.5], vec![0.5]]);
        tr.push(15, 600, vec![vec![0.2], vec![0.1]], vec![vec![0.52], vec![0.48]]);
        tr.push(5, 200, vec![vec![0.3], vec![-0.1]], vec![vec![0.6], vec![0.4]]);
        assert_eq!(tr.records[2].cum_dig, vec![vec![0.5], vec![0.0]]);
        let csv = tr.to_csv();
        assert_eq!(csv.lines().count(), 2 + 3 * 2);
        assert!(csv.lines().nth(2).unwrap().starts_with("1000,a,-1,-1,"));
    }
}
