//! PSNR, multi-scale SSIM, mean-IoU and the sample-diversity report.

use std::fmt::Write as _;

use crate::colorspace::{lab_to_rgb, RgbImage};
use crate::data::SegMap;
use crate::error::{Error, Result};
use crate::generator::{sample_chroma, SampleOptions};
use crate::losses::IGNORE_LABEL;
use crate::model::ColorizationModel;
use crate::params::ParamStore;
use crate::real::Real;
use crate::colorspace::{dequantize_ab, resize_chroma, GrayImage, LabImage};

/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Smallest side accepted by [`ms_ssim`].
pub const MS_SSIM_MIN_SIDE: usize = 32;
/// Per-scale exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(img: &RgbImage, reference: &RgbImage) -> Result<f64> {
    same_shape(img, reference)?;
    let n = img.data().len() as f64;
    let mse = img
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// Number of MS-SSIM scales for an image whose shorter side is `side`:
/// five when the coarsest scale still fits a full window, three otherwise.
pub fn ms_ssim_scales(side: usize) -> usize {
    if side >= SSIM_WINDOW << 4 {
        5
    } else {
        3
    }
}

/// Normalized 1-d Gaussian of odd length `size`.
fn gaussian(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Largest odd window not exceeding `side`, capped at [`SSIM_WINDOW`].
fn window_for(side: usize) -> usize {
    let w = SSIM_WINDOW.min(side);
    if w.is_multiple_of(2) {
        w - 1
    } else {
        w
    }
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean luminance term times contrast-structure term, and the mean
/// contrast-structure term alone.
fn ssim_terms(x: &[f64], y: &[f64], w: usize, h: usize) -> (f64, f64) {
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let k = gaussian(window_for(w.min(h)));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(x, w, h, &k);
    let (my, _, _) = filter_valid(y, w, h, &k);
    let (sxx, _, _) = filter_valid(&xx, w, h, &k);
    let (syy, _, _) = filter_valid(&yy, w, h, &k);
    let (sxy, _, _) = filter_valid(&xy, w, h, &k);
    let n = mx.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// 2x2 average pooling; an odd trailing row or column is dropped.
fn downsample(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let s = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1] + src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
            out.push(s / 4.0);
        }
    }
    (out, ow, oh)
}

fn ms_ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, scales: usize) -> f64 {
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let (mut x, mut y, mut w, mut h) = (x.to_vec(), y.to_vec(), w, h);
    let mut score = 1.0;
    for (j, &wj) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, w, h);
        let term = if j + 1 == scales { ssim } else { cs };
        score *= term.max(0.0).powf(wj / total);
        if j + 1 < scales {
            let (nx, nw, nh) = downsample(&x, w, h);
            let (ny, _, _) = downsample(&y, w, h);
            (x, y, w, h) = (nx, ny, nw, nh);
        }
    }
    score
}

/// Multi-scale SSIM averaged over the three color channels. Constants:
/// `K1 = 0.01`, `K2 = 0.03`, Gaussian window 11 with sigma 1.5 (shrunk to the
/// largest odd size that fits at coarse scales), the standard five scale
/// exponents, and 2x2 average pooling between scales. Images whose shorter
/// side is below 176 use three scales with the first three exponents
/// renormalized. Negative contrast-structure terms count as 0.
pub fn ms_ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w.min(h) < MS_SSIM_MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "MS-SSIM needs both sides >= {MS_SSIM_MIN_SIDE} px, got {w}x{h}"
        )));
    }
    let scales = ms_ssim_scales(w.min(h));
    let plane = |img: &RgbImage, c: usize| -> Vec<f64> { img.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect() };
    let total: f64 = (0..3).map(|c| ms_ssim_plane(&plane(a, c), &plane(b, c), w, h, scales)).sum();
    Ok((total / 3.0).clamp(0.0, 1.0))
}

/// Confusion counts accumulated over any number of label maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    /// `counts[gt * classes + pred]`
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Add one prediction / ground-truth pair. Pixels whose ground truth is
    /// ignored are skipped.
    pub fn add(&mut self, pred: &SegMap, gt: &SegMap) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::Shape("prediction and ground truth differ in size".into()));
        }
        gt.check_classes(self.classes)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p as usize >= self.classes {
                return Err(Error::Range(format!("predicted label {p} with {} classes", self.classes)));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// IoU of every class present in the ground truth.
    pub fn class_iou(&self) -> Vec<(usize, f64)> {
        let c = self.classes;
        (0..c)
            .filter_map(|k| {
                let gt: u64 = (0..c).map(|p| self.counts[k * c + p]).sum();
                if gt == 0 {
                    return None;
                }
                let pred: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let inter = self.counts[k * c + k];
                Some((k, inter as f64 / (gt + pred - inter) as f64))
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth; classes that never
    /// occur there are left out of the mean. 0 when nothing was counted.
    pub fn mean_iou(&self) -> f64 {
        let ious = self.class_iou();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().map(|(_, v)| v).sum::<f64>() / ious.len() as f64
    }
}

pub fn mean_iou(pred: &SegMap, gt: &SegMap, num_classes: usize) -> Result<f64> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.mean_iou())
}

/// Pairwise MS-SSIM of independent colorizations of the same inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityReport {
    pub scores: Vec<f64>,
    pub scales: usize,
    pub seed: u64,
    pub temperature: f64,
}

/// Histogram bins of [`DiversityReport::histogram`].
pub const DIVERSITY_BINS: usize = 20;

impl DiversityReport {
    /// `(low, high, count)` over `[0, 1]` in equal-width bins; the top bin is closed.
    pub fn histogram(&self) -> Vec<(f64, f64, usize)> {
        let mut counts = vec![0usize; DIVERSITY_BINS];
        for &s in &self.scores {
            let i = ((s * DIVERSITY_BINS as f64) as usize).min(DIVERSITY_BINS - 1);
            counts[i] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 / DIVERSITY_BINS as f64, (i + 1) as f64 / DIVERSITY_BINS as f64, c))
            .collect()
    }

    pub fn histogram_csv(&self) -> String {
        let total = self.scores.len().max(1) as f64;
        let mut out = String::from("ssim_low,ssim_high,count,fraction\n");
        for (lo, hi, c) in self.histogram() {
            let _ = writeln!(out, "{lo:.2},{hi:.2},{c},{:.6}", c as f64 / total);
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }

    pub fn median(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        let mut s = self.scores.clone();
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        if s.len().is_multiple_of(2) {
            (s[m - 1] + s[m]) / 2.0
        } else {
            s[m]
        }
    }

    pub fn fraction_below(&self, threshold: f64) -> f64 {
        self.scores.iter().filter(|&&s| s < threshold).count() as f64 / self.scores.len().max(1) as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "ms-ssim pairs={} scales={} mean={:.4} median={:.4} min={:.4} max={:.4} seed={} temperature={}",
            self.scores.len(),
            self.scales,
            self.mean(),
            self.median(),
            self.scores.iter().copied().fold(f64::INFINITY, f64::min),
            self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            self.seed,
            self.temperature
        )
    }
}

/// Sample stream `index` for `gray`, upsampled and recombined with its luminance.
pub fn colorize<F: Real>(model: &ColorizationModel, params: &ParamStore<F>, gray: &GrayImage, opts: SampleOptions, index: usize) -> Result<RgbImage> {
    let q = sample_chroma(model, params, gray, opts, index)?;
    let chroma = resize_chroma(&dequantize_ab(&q), gray.height(), gray.width())?;
    Ok(lab_to_rgb(&LabImage::recombine(gray, &chroma)?))
}

/// For every input, `pairs` pairs of colorizations scored with [`ms_ssim`].
/// Sample streams are `2 (k * pairs + p)` and `2 (k * pairs + p) + 1` for input
/// `k`, pair `p`.
pub fn diversity_report<F: Real>(
    model: &ColorizationModel,
    params: &ParamStore<F>,
    grays: &[GrayImage],
    pairs: usize,
    opts: SampleOptions,
) -> Result<DiversityReport> {
    let mut scores = Vec::with_capacity(grays.len() * pairs);
    for (k, gray) in grays.iter().enumerate() {
        for p in 0..pairs {
            let base = 2 * (k * pairs + p);
            let a = colorize(model, params, gray, opts, base)?;
            let b = colorize(model, params, gray, opts, base + 1)?;
            scores.push(ms_ssim(&a, &b)?);
        }
    }
    let side = model.config.input_size;
    Ok(DiversityReport {
        scores,
        scales: ms_ssim_scales(side),
        seed: opts.seed,
        temperature: opts.temperature,
    })
}
