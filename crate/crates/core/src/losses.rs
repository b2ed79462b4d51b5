//! Loss nodes: discretized-logistic NLL and masked softmax cross-entropy.

use crate::dmol::{dmol_nll, dmol_nll_with_grad, ChromaTargets, DmolConfig, DmolParams};
use crate::error::{Error, Result};
use crate::graph::{softmax_channels, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Label value excluded from the segmentation loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Mean per-pixel negative log-likelihood of `targets` under the mixture
/// parameter map held by `params`.
pub fn dmol_loss<F: Real>(g: &mut Graph<'_, F>, params: Var, targets: &ChromaTargets, cfg: &DmolConfig) -> Result<Var> {
    let map = DmolParams::new(cfg.components, g.value(params).clone())?;
    let (value, grad) = if g.requires_grad(params) {
        let (v, grad) = dmol_nll_with_grad(&map, targets, cfg)?;
        (v, Some(grad))
    } else {
        (dmol_nll(&map, targets, cfg)?, None)
    };
    Ok(g.loss(params, F::c(value), grad))
}

/// Mean softmax cross-entropy over pixels whose label is not
/// [`IGNORE_LABEL`], and its gradient with respect to the logits.
/// `labels` are in `(n, y, x)` order. With no labelled pixel the loss is 0.
pub fn cross_entropy_with_grad<F: Real>(logits: &Tensor<F>, labels: &[u8]) -> Result<(f64, Tensor<F>)> {
    let (c, n, h, w) = logits.dims4();
    let plane = n * h * w;
    if labels.len() != plane {
        return Err(Error::Shape(format!("{} labels for {plane} pixels", labels.len())));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("segmentation logits".into()));
    }
    let probs = softmax_channels(logits);
    let pd = probs.data();
    let counted = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = vec![F::zero(); logits.numel()];
    if counted == 0 {
        return Ok((0.0, Tensor::from_vec(logits.shape(), grad)?));
    }
    let scale = 1.0 / counted as f64;
    let mut total = 0.0;
    let ld = logits.data();
    for (p, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= c {
            return Err(Error::Range(format!("label {label} >= {c} classes")));
        }
        // log-sum-exp form keeps the loss accurate when the target probability underflows
        let mx = (0..c).map(|k| ld[k * plane + p].f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + (0..c).map(|k| (ld[k * plane + p].f64() - mx).exp()).sum::<f64>().ln();
        total += lse - ld[label * plane + p].f64();
        for k in 0..c {
            let target = if k == label { 1.0 } else { 0.0 };
            grad[k * plane + p] = F::c(scale * (pd[k * plane + p].f64() - target));
        }
    }
    Ok((total * scale, Tensor::from_vec(logits.shape(), grad)?))
}

pub fn cross_entropy_loss<F: Real>(g: &mut Graph<'_, F>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (value, grad) = cross_entropy_with_grad(g.value(logits), labels)?;
    let grad = g.requires_grad(logits).then_some(grad);
    Ok(g.loss(logits, F::c(value), grad))
}
