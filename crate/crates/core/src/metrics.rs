//! Fusion quality metrics on 8-bit display-range luma.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const HIST_BINS: usize = 256;

/// Single-channel image in display range `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::validation("image", "data length does not match dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "metric input" });
        }
        Ok(GrayImage { height, width, data })
    }

    /// Model-space tensor (`[-1, 1]`) to display-range luma. Three-channel
    /// tensors use BT.601 weights; other channel counts are averaged.
    pub fn from_model(x: &ImageTensor) -> Result<Self> {
        let (h, w, c) = x.shape();
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for xx in 0..w {
                let px = |ch: usize| (x.get(y, xx, ch) + 1.0) * 0.5 * PEAK;
                let v = if c == 3 {
                    0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2)
                } else {
                    (0..c).map(px).sum::<f64>() / c as f64
                };
                data.push(v);
            }
        }
        Self::new(h, w, data)
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn same_shape(&self, other: &GrayImage) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch {
                expected: (self.height, self.width, 1),
                got: (other.height, other.width, 1),
            });
        }
        Ok(())
    }

    fn non_degenerate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::validation("image", "needs at least 2x2 pixels"));
        }
        Ok(())
    }
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

/// Peak-255 PSNR in dB; `+inf` for identical images.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / m).log10()
    }
}

/// Pearson correlation. A constant input has no defined correlation: the
/// value is reported as 0 and the flag is set.
pub fn cc(a: &GrayImage, b: &GrayImage) -> Result<(f64, bool)> {
    a.same_shape(b)?;
    let n = a.data.len() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0), false))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Separable Gaussian filter; taps falling outside the image are dropped and
/// the remaining weights renormalized.
fn gaussian_filter(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (i, kv) in k.iter().enumerate() {
                    let off = i as isize - r;
                    let (yy, xx) = if along_x {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += kv * src[yy as usize * w + xx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}

/// Per-pixel SSIM of two single-channel planes with the given dynamic range.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Vec<f64> {
    let k = gaussian_kernel();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mu_a = gaussian_filter(a, h, w, &k);
    let mu_b = gaussian_filter(b, h, w, &k);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_aa = gaussian_filter(&aa, h, w, &k);
    let e_bb = gaussian_filter(&bb, h, w, &k);
    let e_ab = gaussian_filter(&ab, h, w, &k);
    (0..h * w)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

/// Mean SSIM at peak 255.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_shape(b)?;
    let m = ssim_map(&a.data, &b.data, a.height, a.width, PEAK);
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Population standard deviation.
pub fn sd(x: &GrayImage) -> f64 {
    let n = x.data.len() as f64;
    let m = x.data.iter().sum::<f64>() / n;
    (x.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn bin(v: f64) -> usize {
    v.round().clamp(0.0, (HIST_BINS - 1) as f64) as usize
}

/// Shannon entropy of the 256-bin histogram, in bits.
pub fn entropy(x: &GrayImage) -> f64 {
    let mut hist = [0usize; HIST_BINS];
    for &v in &x.data {
        hist[bin(v)] += 1;
    }
    let n = x.data.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean of `sqrt((dx^2 + dy^2) / 2)` over forward differences.
pub fn average_gradient(x: &GrayImage) -> Result<f64> {
    x.non_degenerate()?;
    let mut acc = 0.0;
    for y in 0..x.height - 1 {
        for xx in 0..x.width - 1 {
            let dx = x.at(y, xx + 1) - x.at(y, xx);
            let dy = x.at(y + 1, xx) - x.at(y, xx);
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(acc / ((x.height - 1) * (x.width - 1)) as f64)
}

/// `sqrt(RF^2 + CF^2)` with both frequencies normalized by the pixel count.
pub fn spatial_frequency(x: &GrayImage) -> Result<f64> {
    x.non_degenerate()?;
    let (mut rf, mut cf) = (0.0, 0.0);
    for y in 0..x.height {
        for xx in 0..x.width {
            if xx > 0 {
                rf += (x.at(y, xx) - x.at(y, xx - 1)).powi(2);
            }
            if y > 0 {
                cf += (x.at(y, xx) - x.at(y - 1, xx)).powi(2);
            }
        }
    }
    let n = x.data.len() as f64;
    Ok((rf / n + cf / n).sqrt())
}

/// Mean Sobel gradient magnitude with replicated borders.
pub fn edge_intensity(x: &GrayImage) -> Result<f64> {
    x.non_degenerate()?;
    let (h, w) = (x.height as isize, x.width as isize);
    let p = |y: isize, xx: isize| x.at(y.clamp(0, h - 1) as usize, xx.clamp(0, w - 1) as usize);
    let mut acc = 0.0;
    for y in 0..h {
        for xx in 0..w {
            let gx = (p(y - 1, xx + 1) + 2.0 * p(y, xx + 1) + p(y + 1, xx + 1))
                - (p(y - 1, xx - 1) + 2.0 * p(y, xx - 1) + p(y + 1, xx - 1));
            let gy = (p(y + 1, xx - 1) + 2.0 * p(y + 1, xx) + p(y + 1, xx + 1))
                - (p(y - 1, xx - 1) + 2.0 * p(y - 1, xx) + p(y - 1, xx + 1));
            acc += (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(acc / (h * w) as f64)
}

/// Mutual information in bits from a 256x256 joint histogram.
pub fn mutual_information(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_shape(b)?;
    let mut joint = vec![0usize; HIST_BINS * HIST_BINS];
    let mut pa = [0usize; HIST_BINS];
    let mut pb = [0usize; HIST_BINS];
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (i, j) = (bin(x), bin(y));
        joint[i * HIST_BINS + j] += 1;
        pa[i] += 1;
        pb[j] += 1;
    }
    let n = a.data.len() as f64;
    let mut mi = 0.0;
    for i in 0..HIST_BINS {
        if pa[i] == 0 {
            continue;
        }
        for j in 0..HIST_BINS {
            let c = joint[i * HIST_BINS + j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (pa[i] as f64 * pb[j] as f64)).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// `sum_k MI(fused; source_k)`.
pub fn mi(fused: &GrayImage, sources: &[GrayImage]) -> Result<f64> {
    sources.iter().map(|s| mutual_information(fused, s)).sum()
}

/// No-reference statistics of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionStats {
    pub sd: f64,
    pub en: f64,
    pub ag: f64,
    pub sf: f64,
    pub ei: f64,
}

pub fn fusion_stats(x: &GrayImage) -> Result<FusionStats> {
    x.non_degenerate()?;
    Ok(FusionStats {
        sd: sd(x),
        en: entropy(x),
        ag: average_gradient(x)?,
        sf: spatial_frequency(x)?,
        ei: edge_intensity(x)?,
    })
}

/// Report column order.
pub const COLUMNS: [&str; 13] = [
    "PSNR", "SSIM", "MSE", "Nabf", "CC", "LPIPS", "SD", "EI", "EN", "AG", "SF", "MI", "SSIM_f",
];

/// Metric values for one fused image. `None` marks metrics that are not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub id: String,
    pub values: Vec<(&'static str, Option<f64>)>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| *n == name).and_then(|(_, v)| *v)
    }
}

/// Metrics of a fused image. With a reference, PSNR/SSIM/MSE/CC compare
/// against it; otherwise they are averaged over the sources, PSNR being taken
/// from the averaged MSE. `SSIM_f` is always the sum of SSIM over the sources.
pub fn fusion_report(
    id: &str,
    fused: &GrayImage,
    sources: &[GrayImage],
    reference: Option<&GrayImage>,
) -> Result<MetricReport> {
    if sources.is_empty() {
        return Err(Error::validation("sources", "need at least one source image"));
    }
    let mut warnings = Vec::new();
    let mut ssim_f = 0.0;
    for src in sources {
        ssim_f += ssim(fused, src)?;
    }
    let (m, s, c) = match reference {
        Some(r) => {
            let (c, flag) = cc(fused, r)?;
            if flag {
                warnings.push("CC undefined for constant image; reported as 0".to_string());
            }
            (mse(fused, r)?, ssim(fused, r)?, c)
        }
        None => {
            let k = sources.len() as f64;
            let (mut m, mut s, mut c) = (0.0, 0.0, 0.0);
            for src in sources {
                m += mse(fused, src)? / k;
                s += ssim(fused, src)? / k;
                let (v, flag) = cc(fused, src)?;
                if flag {
                    warnings.push("CC undefined for constant image; reported as 0".to_string());
                }
                c += v / k;
            }
            (m, s, c)
        }
    };
    let st = fusion_stats(fused)?;
    let mi_v = mi(fused, sources)?;
    let values = vec![
        ("PSNR", Some(psnr_from_mse(m))),
        ("SSIM", Some(s)),
        ("MSE", Some(m)),
        ("Nabf", None),
        ("CC", Some(c)),
        ("LPIPS", None),
        ("SD", Some(st.sd)),
        ("EI", Some(st.ei)),
        ("EN", Some(st.en)),
        ("AG", Some(st.ag)),
        ("SF", Some(st.sf)),
        ("MI", Some(mi_v)),
        ("SSIM_f", Some(ssim_f)),
    ];
    warnings.dedup();
    Ok(MetricReport {
        id: id.to_string(),
        values,
        warnings,
    })
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => "n/a".to_string(),
        Some(x) if x.is_infinite() => "inf".to_string(),
        Some(x) => format!("{x:.6}"),
    }
}

fn parameter_lines() -> String {
    format!("#ssim_window={SSIM_WINDOW},ssim_sigma={SSIM_SIGMA},peak={PEAK},mi_bins={HIST_BINS},color=bt601_luma\n")
}

/// CSV with one row per report.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("#schema=dig2dig.metrics.v1\n");
    out.push_str(&parameter_lines());
    out.push_str("image,");
    out.push_str(&COLUMNS.join(","));
    out.push('\n');
    for r in reports {
        out.push_str(&r.id);
        for (_, v) in &r.values {
            out.push(',');
            out.push_str(&fmt_value(*v));
        }
        out.push('\n');
    }
    out
}

/// Aligned plain-text table of the same data.
pub fn reports_to_table(reports: &[MetricReport]) -> String {
    let id_w = reports.iter().map(|r| r.id.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<id_w$}", "image");
    for c in COLUMNS {
        let _ = write!(out, " {c:>12}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<id_w$}", r.id);
        for (_, v) in &r.values {
            let _ = write!(out, " {:>12}", fmt_value(*v));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> GrayImage {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        GrayImage::new(h, w, data).unwrap()
    }

    fn ramp() -> GrayImage {
        img(12, 9, |y, x| ((y * 37 + x * 11) % 256) as f64)
    }

    #[test]
    fn identity_values() {
        let a = ramp();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cc(&a, &a).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_image_anticorrelates() {
        let a = ramp();
        let b = img(12, 9, |y, x| 255.0 - a.at(y, x));
        assert!((cc(&a, &b).unwrap().0 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cc_is_flagged() {
        let a = img(4, 4, |_, _| 7.0);
        let (v, flag) = cc(&a, &ramp_like(4, 4)).unwrap();
        assert_eq!(v, 0.0);
        assert!(flag);
    }

    fn ramp_like(h: usize, w: usize) -> GrayImage {
        img(h, w, |y, x| (y * w + x) as f64)
    }

    #[test]
    fn degenerate_statistics() {
        let a = img(5, 6, |_, _| 100.0);
        let s = fusion_stats(&a).unwrap();
        assert_eq!((s.sd, s.en, s.ag, s.sf, s.ei), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(fusion_stats(&img(1, 1, |_, _| 1.0)).is_err());
    }

    #[test]
    fn checkerboard_statistics() {
        let a = img(8, 8, |y, x| if (y + x) % 2 == 0 { 0.0 } else { 255.0 });
        assert_eq!(sd(&a), 127.5);
        assert!((entropy(&a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mi_of_image_with_itself_is_its_entropy() {
        let a = ramp();
        assert!((mutual_information(&a, &a).unwrap() - entropy(&a)).abs() < 1e-12);
    }

    #[test]
    fn ssim_border_window_renormalizes() {
        let k = gaussian_kernel();
        let flat = vec![3.0; 20];
        let f = gaussian_filter(&flat, 4, 5, &k);
        assert!(f.iter().all(|v| (v - 3.0).abs() < 1e-14));
    }

    #[test]
    fn model_space_conversion() {
        let t = ImageTensor::from_fn(1, 2, 3, |_, x, _| if x == 0 { -1.0 } else { 1.0 });
        let g = GrayImage::from_model(&t).unwrap();
        assert!(g.data[0].abs() < 1e-12);
        assert!((g.data[1] - 255.0).abs() < 1e-12);
    }

    #[test]
    fn report_layout() {
        let a = ramp();
        let b = img(12, 9, |y, x| a.at(y, x) * 0.5);
        let r = fusion_report("x", &a, &[a.clone(), b], None).unwrap();
        assert_eq!(r.values.iter().map(|(n, _)| *n).collect::<Vec<_>>(), COLUMNS.to_vec());
        let csv = reports_to_csv(std::slice::from_ref(&r));
        assert!(csv.lines().nth(2).unwrap().starts_with("image,PSNR,SSIM,MSE,Nabf"));
        assert!(csv.lines().nth(3).unwrap().contains(",n/a,"));
        assert!(reports_to_table(&[r]).contains("n/a"));
    }

    #[test]
    fn summed_ssim_is_labelled_apart_from_pairwise() {
        let a = ramp();
        let b = img(12, 9, |y, x| a.at(y, x) * 0.5);
        let pair = [ssim(&a, &a).unwrap(), ssim(&a, &b).unwrap()];
        let r = fusion_report("x", &a, &[a.clone(), b.clone()], None).unwrap();
        assert!((r.get("SSIM_f").unwrap() - (pair[0] + pair[1])).abs() < 1e-12);
        assert!((r.get("SSIM").unwrap() - (pair[0] + pair[1]) / 2.0).abs() < 1e-12);
        let with_ref = fusion_report("x", &a, &[a.clone(), b.clone()], Some(&b)).unwrap();
        assert_eq!(with_ref.get("SSIM"), Some(pair[1]));
        assert_eq!(with_ref.get("SSIM_f"), r.get("SSIM_f"));
    }
}
