//! Discretized mixture of logistics over the two chroma channels of a pixel.
//!
//! Every pixel carries `K` components. Component `k` models channel `a` as a
//! logistic with mean `mu_a` and log-scale `s_a`, and channel `b` as a
//! logistic whose mean is shifted by the realized `a` value:
//! `mu_b + coeff * a`. Each channel value is a bin center on the grid
//! `2 i / (B - 1) - 1`; the probability of a bin is the logistic mass over
//! `[center - 1/(B-1), center + 1/(B-1)]`, with the outermost bins extended
//! to `-inf` / `+inf`.
//!
//! Parameter maps are `[6K, N, H, W]` activations laid out as six blocks of
//! `K` channels: mixture logits, `mu_a`, `mu_b`, `s_a`, `s_b`, `coeff`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{bin_center, bin_of_normalized, ChromaMap, QuantizedChroma, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_COMPONENTS: usize = 10;
pub const DEFAULT_LOG_SCALE_MIN: f64 = -7.0;
/// Parameter blocks per mixture component.
pub const PARAMS_PER_COMPONENT: usize = 6;

const LOGIT: usize = 0;
const MEAN_A: usize = 1;
const MEAN_B: usize = 2;
const LOG_SCALE_A: usize = 3;
const LOG_SCALE_B: usize = 4;
const COEFF: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmolConfig {
    pub components: usize,
    pub bins: usize,
    pub log_scale_min: f64,
}

impl Default for DmolConfig {
    fn default() -> Self {
        Self {
            components: DEFAULT_COMPONENTS,
            bins: DEFAULT_BINS,
            log_scale_min: DEFAULT_LOG_SCALE_MIN,
        }
    }
}

impl DmolConfig {
    pub fn channels(&self) -> usize {
        PARAMS_PER_COMPONENT * self.components
    }

    fn half_width(&self) -> f64 {
        1.0 / (self.bins - 1) as f64
    }
}

/// Per-pixel mixture parameters, `[6K, N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DmolParams<F> {
    components: usize,
    map: Tensor<F>,
}

impl<F: Real> DmolParams<F> {
    pub fn new(components: usize, map: Tensor<F>) -> Result<Self> {
        if map.shape().len() != 4 || map.shape()[0] != PARAMS_PER_COMPONENT * components || components == 0 {
            return Err(Error::Shape(format!(
                "mixture of {components} needs {} channels, got map {:?}",
                PARAMS_PER_COMPONENT * components,
                map.shape()
            )));
        }
        if !map.all_finite() {
            return Err(Error::NonFinite("mixture parameters".into()));
        }
        Ok(Self { components, map })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn map(&self) -> &Tensor<F> {
        &self.map
    }

    /// `(batch, height, width)`.
    pub fn spatial(&self) -> (usize, usize, usize) {
        let (_, n, h, w) = self.map.dims4();
        (n, h, w)
    }

    fn plane(&self) -> usize {
        let (n, h, w) = self.spatial();
        n * h * w
    }

    #[inline]
    fn get(&self, block: usize, k: usize, p: usize) -> f64 {
        self.map.data()[(block * self.components + k) * self.plane() + p].f64()
    }
}

/// A batch of quantized chroma targets at the parameter map's resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChromaTargets {
    bins: usize,
    n: usize,
    h: usize,
    w: usize,
    a: Vec<u16>,
    b: Vec<u16>,
}

impl ChromaTargets {
    pub fn from_quantized(items: &[&QuantizedChroma]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty target batch".into()))?;
        let (h, w, bins) = (first.height(), first.width(), first.bins());
        let mut a = Vec::with_capacity(items.len() * h * w);
        let mut b = Vec::with_capacity(items.len() * h * w);
        for q in items {
            if (q.height(), q.width(), q.bins()) != (h, w, bins) {
                return Err(Error::Shape("targets in a batch must share size and bins".into()));
            }
            a.extend_from_slice(q.a_bins());
            b.extend_from_slice(q.b_bins());
        }
        Ok(Self {
            bins,
            n: items.len(),
            h,
            w,
            a,
            b,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn spatial(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn a_bins(&self) -> &[u16] {
        &self.a
    }

    pub fn b_bins(&self) -> &[u16] {
        &self.b
    }

    /// Normalized values as a `[2, N, H, W]` activation.
    pub fn normalized_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self
            .a
            .iter()
            .chain(&self.b)
            .map(|&i| F::c(bin_center(i as usize, self.bins)))
            .collect();
        Tensor::from_vec(&[2, self.n, self.h, self.w], data).expect("target tensor shape")
    }

    /// Item `index` of the batch.
    pub fn item(&self, index: usize) -> QuantizedChroma {
        let hw = self.h * self.w;
        let r = index * hw..(index + 1) * hw;
        QuantizedChroma::new(self.w, self.h, self.bins, self.a[r.clone()].to_vec(), self.b[r].to_vec())
            .expect("valid by construction")
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-probability of one discretized logistic bin and its derivatives with
/// respect to the mean and the (effective) log-scale.
#[derive(Clone, Copy, Debug)]
struct BinTerm {
    logp: f64,
    dmean: f64,
    dlog_scale: f64,
}

fn discretized_logistic(x: f64, mean: f64, log_scale: f64, half: f64, low: bool, high: bool) -> BinTerm {
    let inv = (-log_scale).exp();
    let c = x - mean;
    let upper = inv * (c + half);
    let lower = inv * (c - half);
    if low {
        // log sigmoid(upper)
        let s = sigmoid(-upper);
        BinTerm {
            logp: -softplus(-upper),
            dmean: -inv * s,
            dlog_scale: -upper * s,
        }
    } else if high {
        // log (1 - sigmoid(lower))
        let s = sigmoid(lower);
        BinTerm {
            logp: -softplus(lower),
            dmean: inv * s,
            dlog_scale: lower * s,
        }
    } else {
        // log(sigmoid(u) - sigmoid(l)) = log sigmoid(u) + log(1 - sigmoid(l)) + log(1 - e^{-(u - l)})
        let d = upper - lower;
        let su = sigmoid(-upper);
        let sl = sigmoid(lower);
        let ratio = if d < 1e-12 { 1.0 } else { d / d.exp_m1() };
        BinTerm {
            logp: -softplus(-upper) - softplus(lower) + (-(-d).exp_m1()).ln(),
            dmean: -inv * (su - sl),
            dlog_scale: -upper * su + lower * sl - ratio,
        }
    }
}

fn check_targets<F: Real>(params: &DmolParams<F>, targets: &ChromaTargets, cfg: &DmolConfig) -> Result<()> {
    if params.spatial() != targets.spatial() {
        return Err(Error::Shape(format!(
            "mixture map {:?} vs targets {:?}",
            params.spatial(),
            targets.spatial()
        )));
    }
    if params.components != cfg.components {
        return Err(Error::Shape(format!(
            "map has {} components, config {}",
            params.components, cfg.components
        )));
    }
    if targets.bins != cfg.bins {
        return Err(Error::Shape(format!(
            "targets quantized to {} bins, config {}",
            targets.bins, cfg.bins
        )));
    }
    Ok(())
}

/// Log-likelihood of pixel `p` plus, optionally, its gradient written into
/// `grad` (scaled by `scale`) at the parameter-map positions of `p`.
fn pixel_log_prob<F: Real>(
    params: &DmolParams<F>,
    targets: &ChromaTargets,
    cfg: &DmolConfig,
    p: usize,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let k_count = params.components;
    let bins = cfg.bins;
    let half = cfg.half_width();
    let ia = targets.a[p] as usize;
    let ib = targets.b[p] as usize;
    let (xa, xb) = (bin_center(ia, bins), bin_center(ib, bins));

    let logits: Vec<f64> = (0..k_count).map(|k| params.get(LOGIT, k, p)).collect();
    let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse_logits = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();

    let mut comps = Vec::with_capacity(k_count);
    for (k, &logit) in logits.iter().enumerate() {
        let raw_sa = params.get(LOG_SCALE_A, k, p);
        let raw_sb = params.get(LOG_SCALE_B, k, p);
        let sa = raw_sa.max(cfg.log_scale_min);
        let sb = raw_sb.max(cfg.log_scale_min);
        let mean_a = params.get(MEAN_A, k, p);
        let coeff = params.get(COEFF, k, p);
        let mean_b = params.get(MEAN_B, k, p) + coeff * xa;
        let ta = discretized_logistic(xa, mean_a, sa, half, ia == 0, ia == bins - 1);
        let tb = discretized_logistic(xb, mean_b, sb, half, ib == 0, ib == bins - 1);
        let log_pi = logit - lse_logits;
        comps.push((log_pi + ta.logp + tb.logp, ta, tb, raw_sa >= cfg.log_scale_min, raw_sb >= cfg.log_scale_min));
    }
    let cmax = comps.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let lse = cmax + comps.iter().map(|c| (c.0 - cmax).exp()).sum::<f64>().ln();

    if let Some((g, scale)) = grad {
        let plane = params.plane();
        let at = |block: usize, k: usize| (block * k_count + k) * plane + p;
        for (k, (c, ta, tb, a_free, b_free)) in comps.iter().enumerate() {
            let r = (c - lse).exp();
            let pi = (logits[k] - lse_logits).exp();
            g[at(LOGIT, k)] += scale * (r - pi);
            g[at(MEAN_A, k)] += scale * r * ta.dmean;
            g[at(MEAN_B, k)] += scale * r * tb.dmean;
            if *a_free {
                g[at(LOG_SCALE_A, k)] += scale * r * ta.dlog_scale;
            }
            if *b_free {
                g[at(LOG_SCALE_B, k)] += scale * r * tb.dlog_scale;
            }
            g[at(COEFF, k)] += scale * r * tb.dmean * xa;
        }
    }
    lse
}

/// Per-pixel log-likelihood (nats) in `(n, y, x)` order.
pub fn dmol_log_prob<F: Real>(params: &DmolParams<F>, targets: &ChromaTargets, cfg: &DmolConfig) -> Result<Vec<f64>> {
    check_targets(params, targets, cfg)?;
    Ok((0..params.plane())
        .map(|p| pixel_log_prob(params, targets, cfg, p, None))
        .collect())
}

/// Mean negative log-likelihood per pixel and its gradient with respect to
/// the parameter map.
pub fn dmol_nll_with_grad<F: Real>(
    params: &DmolParams<F>,
    targets: &ChromaTargets,
    cfg: &DmolConfig,
) -> Result<(f64, Tensor<F>)> {
    check_targets(params, targets, cfg)?;
    let plane = params.plane();
    let scale = -1.0 / plane as f64;
    let mut g = vec![0.0f64; params.map.numel()];
    let mut total = 0.0;
    for p in 0..plane {
        total += pixel_log_prob(params, targets, cfg, p, Some((&mut g, scale)));
    }
    let grad = Tensor::from_vec(params.map.shape(), g.into_iter().map(F::c).collect())?;
    Ok((-total / plane as f64, grad))
}

/// Mean negative log-likelihood per pixel.
pub fn dmol_nll<F: Real>(params: &DmolParams<F>, targets: &ChromaTargets, cfg: &DmolConfig) -> Result<f64> {
    let lp = dmol_log_prob(params, targets, cfg)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Mixture weights `softmax(logits / temperature)`.
pub fn tempered_weights(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[inline]
fn logistic_quantile(u: f64) -> f64 {
    let u = u.clamp(1e-5, 1.0 - 1e-5);
    u.ln() - (-u).ln_1p()
}

/// Draw the `(a, b)` bins of pixel `p`. Always consumes exactly three uniforms.
pub fn dmol_sample_pixel<F: Real, R: Rng + ?Sized>(
    params: &DmolParams<F>,
    cfg: &DmolConfig,
    p: usize,
    temperature: f64,
    rng: &mut R,
) -> (u16, u16) {
    let k_count = params.components;
    let u_component: f64 = rng.random();
    let u_a: f64 = rng.random();
    let u_b: f64 = rng.random();

    let logits: Vec<f64> = (0..k_count).map(|k| params.get(LOGIT, k, p)).collect();
    let weights = tempered_weights(&logits, temperature);
    let mut k = k_count - 1;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u_component < acc {
            k = i;
            break;
        }
    }

    let sa = params.get(LOG_SCALE_A, k, p).max(cfg.log_scale_min);
    let sb = params.get(LOG_SCALE_B, k, p).max(cfg.log_scale_min);
    let a = params.get(MEAN_A, k, p) + temperature * sa.exp() * logistic_quantile(u_a);
    let ia = bin_of_normalized(a, cfg.bins);
    let a_value = bin_center(ia, cfg.bins);
    let mean_b = params.get(MEAN_B, k, p) + params.get(COEFF, k, p) * a_value;
    let b = mean_b + temperature * sb.exp() * logistic_quantile(u_b);
    let ib = bin_of_normalized(b, cfg.bins);
    (ia as u16, ib as u16)
}

/// Sample every pixel of every image independently.
pub fn dmol_sample<F: Real, R: Rng + ?Sized>(
    params: &DmolParams<F>,
    cfg: &DmolConfig,
    rng: &mut R,
    temperature: f64,
) -> Result<Vec<QuantizedChroma>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    if params.components != cfg.components {
        return Err(Error::Shape("component count differs from config".into()));
    }
    let (n, h, w) = params.spatial();
    let mut out = Vec::with_capacity(n);
    for img in 0..n {
        let mut a = Vec::with_capacity(h * w);
        let mut b = Vec::with_capacity(h * w);
        for i in 0..h * w {
            let (ia, ib) = dmol_sample_pixel(params, cfg, img * h * w + i, temperature, rng);
            a.push(ia);
            b.push(ib);
        }
        out.push(QuantizedChroma::new(w, h, cfg.bins, a, b)?);
    }
    Ok(out)
}

/// Mean of a logistic clamped to `[-1, 1]`:
/// `-1 + s (softplus((mu + 1) / s) - softplus((mu - 1) / s))`.
fn clamped_logistic_mean(mean: f64, log_scale: f64) -> f64 {
    let s = log_scale.exp();
    (-1.0 + s * (softplus((mean + 1.0) / s) - softplus((mean - 1.0) / s))).clamp(-1.0, 1.0)
}

/// Expectation of the discretized mixture per pixel in normalized units,
/// `(a, b)` in `(n, y, x)` order. Channel `a` is summed exactly over its bins;
/// channel `b` is averaged over those bins through the coupled mean, using
/// the range-clamped logistic mean for each.
pub fn dmol_mean_normalized<F: Real>(params: &DmolParams<F>, cfg: &DmolConfig) -> (Vec<f64>, Vec<f64>) {
    let plane = params.plane();
    let k_count = params.components;
    let bins = cfg.bins;
    let half = cfg.half_width();
    let centers: Vec<f64> = (0..bins).map(|i| bin_center(i, bins)).collect();
    let mut ea = Vec::with_capacity(plane);
    let mut eb = Vec::with_capacity(plane);
    for p in 0..plane {
        let logits: Vec<f64> = (0..k_count).map(|k| params.get(LOGIT, k, p)).collect();
        let w = tempered_weights(&logits, 1.0);
        let (mut a, mut b) = (0.0, 0.0);
        for (k, wk) in w.iter().enumerate() {
            let ma = params.get(MEAN_A, k, p);
            let sa = params.get(LOG_SCALE_A, k, p).max(cfg.log_scale_min);
            let mb = params.get(MEAN_B, k, p);
            let sb = params.get(LOG_SCALE_B, k, p).max(cfg.log_scale_min);
            let coeff = params.get(COEFF, k, p);
            for (i, &x) in centers.iter().enumerate() {
                let pa = discretized_logistic(x, ma, sa, half, i == 0, i == bins - 1).logp.exp();
                if pa < 1e-15 {
                    continue;
                }
                a += wk * pa * x;
                b += wk * pa * clamped_logistic_mean(mb + coeff * x, sb);
            }
        }
        ea.push(a.clamp(-1.0, 1.0));
        eb.push(b.clamp(-1.0, 1.0));
    }
    (ea, eb)
}

/// Mixture expectation of every image as a chroma map.
pub fn dmol_mean<F: Real>(params: &DmolParams<F>, cfg: &DmolConfig) -> Vec<ChromaMap> {
    let (n, h, w) = params.spatial();
    let (ea, eb) = dmol_mean_normalized(params, cfg);
    (0..n)
        .map(|i| {
            let r = i * h * w..(i + 1) * h * w;
            ChromaMap::from_normalized(w, h, &ea[r.clone()], &eb[r]).expect("clamped to range")
        })
        .collect()
}
