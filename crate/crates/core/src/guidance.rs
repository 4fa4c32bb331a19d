//! Per-modality conditional guidance and its weighted assembly.

use std::collections::HashSet;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

pub const SIMPLEX_TOL: f64 = 1e-12;

/// Ordered, named condition images `c_1..c_K` sharing one shape.
#[derive(Debug, Clone)]
pub struct ModalityStack {
    images: Vec<ImageTensor>,
    names: Vec<String>,
}

impl ModalityStack {
    pub fn new(images: Vec<ImageTensor>, names: Vec<String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::validation("modalities", "need at least one modality"));
        }
        if images.len() != names.len() {
            return Err(Error::validation("names", "one name per modality"));
        }
        for img in &images[1..] {
            images[0].ensure_same_shape(img)?;
        }
        for img in &images {
            img.check_finite("modality image")?;
        }
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::validation("names", "modality names must be unique"));
        }
        Ok(ModalityStack { images, names })
    }

    /// Stack with names `m0, m1, ...`.
    pub fn unnamed(images: Vec<ImageTensor>) -> Result<Self> {
        let names = (0..images.len()).map(|i| format!("m{i}")).collect();
        Self::new(images, names)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn image(&self, k: usize) -> &ImageTensor {
        &self.images[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }

    /// Reorders modalities (and names) by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            order.iter().map(|&i| self.images[i].clone()).collect(),
            order.iter().map(|&i| self.names[i].clone()).collect(),
        )
    }
}

/// Modality weights: one scalar per modality, or one `H x W` map per modality.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightField {
    Global(Vec<f64>),
    Patchwise {
        height: usize,
        width: usize,
        maps: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceWeights {
    pub t: usize,
    pub field: WeightField,
}

impl GuidanceWeights {
    pub fn global(t: usize, values: Vec<f64>) -> Result<Self> {
        let w = GuidanceWeights {
            t,
            field: WeightField::Global(values),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn equal(t: usize, k: usize) -> Self {
        GuidanceWeights {
            t,
            field: WeightField::Global(vec![1.0 / k as f64; k]),
        }
    }

    pub fn patchwise(t: usize, height: usize, width: usize, maps: Vec<Vec<f64>>) -> Result<Self> {
        let w = GuidanceWeights {
            t,
            field: WeightField::Patchwise { height, width, maps },
        };
        w.validate()?;
        Ok(w)
    }

    pub fn modalities(&self) -> usize {
        match &self.field {
            WeightField::Global(v) => v.len(),
            WeightField::Patchwise { maps, .. } => maps.len(),
        }
    }

    /// Weight of modality `k` at pixel `(y, x)`.
    pub fn at(&self, k: usize, y: usize, x: usize) -> f64 {
        match &self.field {
            WeightField::Global(v) => v[k],
            WeightField::Patchwise { width, maps, .. } => maps[k][y * width + x],
        }
    }

    /// Nonnegativity and sum-to-one at every location.
    pub fn validate(&self) -> Result<()> {
        let check = |vals: &mut dyn Iterator<Item = f64>| -> Result<()> {
            let mut sum = 0.0;
            for v in vals {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::validation("weights", format!("invalid weight {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::validation("weights", format!("weights sum to {sum}")));
            }
            Ok(())
        };
        match &self.field {
            WeightField::Global(v) => {
                if v.is_empty() {
                    return Err(Error::validation("weights", "no modalities"));
                }
                check(&mut v.iter().copied())
            }
            WeightField::Patchwise { height, width, maps } => {
                if maps.is_empty() || maps.iter().any(|m| m.len() != height * width) {
                    return Err(Error::validation("weights", "map shape mismatch"));
                }
                for p in 0..height * width {
                    check(&mut maps.iter().map(|m| m[p]))?;
                }
                Ok(())
            }
        }
    }

    /// Spatial mean of each modality's weight.
    pub fn mean_per_modality(&self) -> Vec<f64> {
        match &self.field {
            WeightField::Global(v) => v.clone(),
            WeightField::Patchwise { maps, .. } => {
                maps.iter().map(|m| m.iter().sum::<f64>() / m.len() as f64).collect()
            }
        }
    }
}

/// `(c_k - x0_hat) / (1 - abar_t)`, the Gaussian-likelihood guidance gradient
/// with the `x0_hat` Jacobian taken as identity.
pub fn guidance_from_x0(c_k: &ImageTensor, x0_hat: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
    s.check_t(t)?;
    let d = 1.0 - s.alpha_bar(t);
    let g = c_k.zip_map(x0_hat, |c, x| (c - x) / d)?;
    if !g.all_finite() {
        return Err(Error::Divergence { t });
    }
    Ok(g)
}

/// Guidance gradient of one modality at `x_t`.
pub fn modality_guidance_grad(
    c_k: &ImageTensor,
    x_t: &ImageTensor,
    t: usize,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
) -> Result<ImageTensor> {
    c_k.ensure_same_shape(x_t)?;
    let (_, x0) = d.predict(x_t, t, s)?;
    guidance_from_x0(c_k, &x0, t, s)
}

/// `sum_k w_k * grad_k` (elementwise for patchwise weights).
pub fn assemble_guidance(ms: &ModalityStack, w: &GuidanceWeights, grads: &[ImageTensor]) -> Result<ImageTensor> {
    w.validate()?;
    if grads.len() != ms.len() || w.modalities() != ms.len() {
        return Err(Error::validation(
            "grads",
            format!("expected {} gradients and weights", ms.len()),
        ));
    }
    let (h, wd, c) = ms.shape();
    for g in grads {
        ms.image(0).ensure_same_shape(g)?;
    }
    if let WeightField::Patchwise { height, width, .. } = &w.field {
        if (*height, *width) != (h, wd) {
            return Err(Error::validation("weights", "weight map does not match image size"));
        }
    }
    let mut out = ImageTensor::zeros(h, wd, c);
    for (k, g) in grads.iter().enumerate() {
        match &w.field {
            WeightField::Global(v) => {
                let wk = v[k];
                for (o, gv) in out.data_mut().iter_mut().zip(g.data()) {
                    *o += wk * gv;
                }
            }
            WeightField::Patchwise { maps, .. } => {
                let map = &maps[k];
                for y in 0..h {
                    for x in 0..wd {
                        let wk = map[y * wd + x];
                        for ch in 0..c {
                            let i = out.index(y, x, ch);
                            out.data_mut()[i] += wk * g.data()[i];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear upsampling of a `rows x cols` patch grid to `height x width`
/// pixels, sampling at patch centres and clamping at the borders.
///
/// Interpolates in `a + f * (b - a)` form so constant grids stay exactly constant.
pub fn upsample_bilinear(
    grid: &[f64],
    rows: usize,
    cols: usize,
    patch_h: usize,
    patch_w: usize,
    height: usize,
    width: usize,
) -> Vec<f64> {
    let coord = |p: usize, size: usize, n: usize| -> (usize, usize, f64) {
        let u = ((p as f64 + 0.5) / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let (r0, r1, fy) = coord(y, patch_h, rows);
        for x in 0..width {
            let (c0, c1, fx) = coord(x, patch_w, cols);
            let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
            let top = lerp(grid[r0 * cols + c0], grid[r0 * cols + c1], fx);
            let bot = lerp(grid[r1 * cols + c0], grid[r1 * cols + c1], fx);
            out[y * width + x] = lerp(top, bot, fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::GaussianDataOracle;
    use crate::schedule::make_linear_schedule;
    use crate::tensor::RngStream;
    use proptest::prelude::*;

    fn stack2(a: ImageTensor, b: ImageTensor) -> ModalityStack {
        ModalityStack::new(vec![a, b], vec!["ir".into(), "vis".into()]).unwrap()
    }

    #[test]
    fn stack_validation() {
        let a = ImageTensor::zeros(2, 2, 1);
        assert!(ModalityStack::new(vec![], vec![]).is_err());
        assert!(ModalityStack::new(vec![a.clone(), a.clone()], vec!["x".into(), "x".into()]).is_err());
        assert!(ModalityStack::new(
            vec![a.clone(), ImageTensor::zeros(3, 2, 1)],
            vec!["a".into(), "b".into()]
        )
        .is_err());
    }

    #[test]
    fn grad_vanishes_when_condition_matches_estimate() {
        let s = make_linear_schedule(50, 1e-4, 0.02).unwrap();
        let x0 = RngStream::new(1).normal_tensor(3, 3, 1);
        let g = guidance_from_x0(&x0, &x0, 10, &s).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opposite_conditions_give_opposite_grads() {
        let s = make_linear_schedule(50, 1e-4, 0.02).unwrap();
        // var = 0 with mu = 0 makes x0_hat = 0 for every x_t
        let o = GaussianDataOracle::new(ImageTensor::zeros(2, 2, 1), 0.0).unwrap();
        let c = RngStream::new(2).normal_tensor(2, 2, 1);
        let xt = RngStream::new(3).normal_tensor(2, 2, 1);
        let g1 = modality_guidance_grad(&c, &xt, 20, &o, &s).unwrap();
        let g2 = modality_guidance_grad(&c.scale(-1.0), &xt, 20, &o, &s).unwrap();
        assert!(g1.add(&g2).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_modality_identity() {
        let g = RngStream::new(4).normal_tensor(3, 2, 1);
        let ms = ModalityStack::unnamed(vec![ImageTensor::zeros(3, 2, 1)]).unwrap();
        let w = GuidanceWeights::global(1, vec![1.0]).unwrap();
        assert_eq!(assemble_guidance(&ms, &w, std::slice::from_ref(&g)).unwrap(), g);
    }

    #[test]
    fn equal_grads_pass_through() {
        let g = RngStream::new(5).normal_tensor(4, 4, 1);
        let ms = stack2(ImageTensor::zeros(4, 4, 1), ImageTensor::zeros(4, 4, 1));
        let w = GuidanceWeights::global(1, vec![0.3, 0.7]).unwrap();
        let out = assemble_guidance(&ms, &w, &[g.clone(), g.clone()]).unwrap();
        assert!(out.max_abs_diff(&g).unwrap() < 1e-15);
    }

    #[test]
    fn half_plane_indicator_assembly() {
        let (h, w) = (4, 6);
        let mut r = RngStream::new(6);
        let g1 = r.normal_tensor(h, w, 1);
        let g2 = r.normal_tensor(h, w, 1);
        let left: Vec<f64> = (0..h * w).map(|i| if i % w < w / 2 { 1.0 } else { 0.0 }).collect();
        let right: Vec<f64> = left.iter().map(|v| 1.0 - v).collect();
        let weights = GuidanceWeights::patchwise(1, h, w, vec![left, right]).unwrap();
        let ms = stack2(ImageTensor::zeros(h, w, 1), ImageTensor::zeros(h, w, 1));
        let out = assemble_guidance(&ms, &weights, &[g1.clone(), g2.clone()]).unwrap();
        for y in 0..h {
            for x in 0..w {
                let want = if x < w / 2 { g1.get(y, x, 0) } else { g2.get(y, x, 0) };
                assert_eq!(out.get(y, x, 0), want);
            }
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(GuidanceWeights::global(1, vec![0.6, 0.6]).is_err());
        assert!(GuidanceWeights::global(1, vec![1.2, -0.2]).is_err());
        assert!(GuidanceWeights::patchwise(1, 1, 2, vec![vec![0.5, 1.0], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn upsampling_preserves_constants_and_corners() {
        let grid = vec![0.25; 6];
        let up = upsample_bilinear(&grid, 2, 3, 4, 4, 8, 12);
        assert!(up.iter().all(|&v| v == 0.25));
        let grid = vec![0.0, 1.0, 2.0, 3.0];
        let up = upsample_bilinear(&grid, 2, 2, 2, 2, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        assert!((up[1] - 0.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn assembly_stays_in_envelope_and_is_permutation_invariant(
            seed in 0u64..1000, w0 in 0.0f64..1.0
        ) {
            let mut r = RngStream::new(seed);
            let g1 = r.normal_tensor(3, 3, 2);
            let g2 = r.normal_tensor(3, 3, 2);
            let ms = stack2(ImageTensor::zeros(3, 3, 2), ImageTensor::zeros(3, 3, 2));
            let w = GuidanceWeights::global(1, vec![w0, 1.0 - w0]).unwrap();
            let out = assemble_guidance(&ms, &w, &[g1.clone(), g2.clone()]).unwrap();
            for i in 0..out.len() {
                let (a, b) = (g1.data()[i], g2.data()[i]);
                prop_assert!(out.data()[i] >= a.min(b) - 1e-12);
                prop_assert!(out.data()[i] <= a.max(b) + 1e-12);
            }
            let swapped = ms.permuted(&[1, 0]).unwrap();
            let ws = GuidanceWeights::global(1, vec![1.0 - w0, w0]).unwrap();
            let out2 = assemble_guidance(&swapped, &ws, &[g2, g1]).unwrap();
            prop_assert!(out.max_abs_diff(&out2).unwrap() < 1e-12);
        }
    }
}
