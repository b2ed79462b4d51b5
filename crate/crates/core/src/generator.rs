//! Conditional autoregressive chroma generator: masked gated convolutions
//! over the teacher-forced chroma canvas, with the condition map injected
//! into every layer.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::gray_batch;
use crate::colorspace::{bin_center, dequantize_ab, resize_chroma, GrayImage, LabImage, QuantizedChroma};
use crate::conv::ConvGeom;
use crate::dmol::{dmol_sample_pixel, DmolParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ColorizationModel;
use crate::nn::{Conv, Init, ParamBuilder};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// How segmentation predictions enter the generator's condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Embedding followed by the per-pixel class probabilities.
    Concat,
    /// Embedding scaled and shifted by maps predicted from the class probabilities.
    FeatureTransform,
    EmbeddingOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Concat, FusionMode::FeatureTransform, FusionMode::EmbeddingOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::FeatureTransform => "feature_transform",
            FusionMode::EmbeddingOnly => "embedding_only",
        }
    }

    pub fn uses_segmentation(self) -> bool {
        self != FusionMode::EmbeddingOnly
    }

    /// Channels of the fused condition map.
    pub fn condition_channels(self, embedding: usize, classes: usize) -> usize {
        match self {
            FusionMode::Concat => embedding + classes,
            _ => embedding,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion mode {s:?} (concat, feature_transform, embedding_only)")))
    }
}

/// Scale and shift maps predicted from class probabilities. Both
/// convolutions start at zero, making the transform the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTransform {
    pub gamma: Conv,
    pub beta: Conv,
}

impl FeatureTransform {
    pub fn build<F: Real, R: Rng>(b: &mut ParamBuilder<'_, F, R>, classes: usize, embedding: usize) -> Self {
        let geom = ConvGeom::same(3, 1);
        Self {
            gamma: b.conv("gamma", classes, embedding, geom, Init::Zeros),
            beta: b.conv("beta", classes, embedding, geom, Init::Zeros),
        }
    }
}

/// Build the condition map from the embedding and, when the mode needs it,
/// the segmentation logits.
pub fn fuse_condition<F: Real>(
    g: &mut Graph<'_, F>,
    emb: Var,
    seg_logits: Option<Var>,
    mode: FusionMode,
    transform: Option<&FeatureTransform>,
) -> Result<Var> {
    if mode == FusionMode::EmbeddingOnly {
        return Ok(emb);
    }
    let seg = seg_logits.ok_or_else(|| Error::InvalidArgument(format!("fusion mode {mode} needs segmentation logits")))?;
    let (es, ss) = (g.value(emb).shape(), g.value(seg).shape());
    if es[1..] != ss[1..] {
        return Err(Error::Shape(format!("embedding {es:?} and segmentation {ss:?} are not aligned")));
    }
    let probs = g.softmax_channels(seg);
    match mode {
        FusionMode::Concat => g.concat(&[emb, probs]),
        FusionMode::FeatureTransform => {
            let t = transform.ok_or_else(|| Error::InvalidArgument("feature_transform needs its parameters".into()))?;
            let gamma = t.gamma.forward(g, probs);
            let beta = t.beta.forward(g, probs);
            let scaled = g.mul(emb, gamma)?;
            let shifted = g.add(emb, scaled)?;
            g.add(shifted, beta)
        }
        FusionMode::EmbeddingOnly => unreachable!(),
    }
}

/// Which taps of a 3x3 kernel a masked convolution may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Rows above and pixels to the left; excludes the center.
    A,
    /// As `A` plus the center.
    B,
}

/// `[cout, cin, 3, 3]` mask of ones and zeros.
pub fn causal_mask<F: Real>(kind: MaskKind, cout: usize, cin: usize) -> Tensor<F> {
    let mut pattern = [F::one(), F::one(), F::one(), F::one(), F::zero(), F::zero(), F::zero(), F::zero(), F::zero()];
    if kind == MaskKind::B {
        pattern[4] = F::one();
    }
    let data = (0..cout * cin).flat_map(|_| pattern).collect();
    Tensor::from_vec(&[cout, cin, 3, 3], data).expect("mask shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorLayer {
    pub conv: Conv,
    pub mask: MaskKind,
    /// 1x1 projection of the condition map, added before the gate.
    pub cond: Conv,
    /// 1x1 residual update, absent on the first layer.
    pub residual: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub layers: Vec<GeneratorLayer>,
    pub out: Conv,
    pub cond_channels: usize,
    pub channels: usize,
}

impl Generator {
    /// Registers parameters under the group `gen`.
    pub fn build<F: Real, R: Rng>(
        b: &mut ParamBuilder<'_, F, R>,
        layers: usize,
        channels: usize,
        cond_channels: usize,
        out_channels: usize,
    ) -> Self {
        let mut sub = b.sub("gen");
        let one = ConvGeom::same(1, 1);
        let layers = (0..layers)
            .map(|i| {
                let mut l = sub.sub(&format!("layer{i}"));
                let cin = if i == 0 { 2 } else { channels };
                GeneratorLayer {
                    conv: l.conv("masked", cin, 2 * channels, ConvGeom::same(3, 1), Init::VarianceScaling),
                    mask: if i == 0 { MaskKind::A } else { MaskKind::B },
                    cond: l.conv("cond", cond_channels, 2 * channels, one, Init::VarianceScaling),
                    residual: (i > 0).then(|| l.conv("residual", channels, channels, one, Init::Zeros)),
                }
            })
            .collect();
        let out = sub.conv("out", channels, out_channels, one, Init::VarianceScaling);
        Self {
            layers,
            out,
            cond_channels,
            channels,
        }
    }

    /// Per-layer condition biases; computed once per condition map.
    pub fn condition_biases<F: Real>(&self, g: &mut Graph<'_, F>, cond: Var) -> Result<Vec<Var>> {
        let c = g.value(cond).shape()[0];
        if c != self.cond_channels {
            return Err(Error::Shape(format!("condition has {c} channels, generator expects {}", self.cond_channels)));
        }
        Ok(self.layers.iter().map(|l| l.cond.forward(g, cond)).collect())
    }

    /// Mixture parameters for every pixel of the teacher-forced `target`
    /// (`[2, N, h, w]`, normalized chroma).
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, target: Var, cond: Var) -> Result<Var> {
        let biases = self.condition_biases(g, cond)?;
        self.forward_with_biases(g, target, &biases)
    }

    pub fn forward_with_biases<F: Real>(&self, g: &mut Graph<'_, F>, target: Var, biases: &[Var]) -> Result<Var> {
        let ts = g.value(target).shape().to_vec();
        if ts.len() != 4 || ts[0] != 2 {
            return Err(Error::Shape(format!("target must be [2, N, h, w], got {ts:?}")));
        }
        if biases.len() != self.layers.len() {
            return Err(Error::Shape(format!("{} biases for {} layers", biases.len(), self.layers.len())));
        }
        let mut h = target;
        for (layer, &bias) in self.layers.iter().zip(biases) {
            let bs = g.value(bias).shape();
            if bs[1..] != ts[1..] {
                return Err(Error::Shape(format!("condition {bs:?} does not match target {ts:?}")));
            }
            let (cout, cin) = (layer.conv.cout, layer.conv.cin);
            let mask = Rc::new(causal_mask(layer.mask, cout, cin));
            let pre = layer.conv.forward_masked(g, h, &mask);
            let pre = g.add(pre, bias)?;
            let gated = g.gate(pre);
            h = match &layer.residual {
                Some(res) => {
                    let update = res.forward(g, gated);
                    g.add(h, update)?
                }
                None => gated,
            };
        }
        Ok(self.out.forward(g, h))
    }
}

/// Randomness and temperature of a sampling run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub seed: u64,
    pub temperature: f64,
}

/// Random stream of sample `index`: the seed picks the key, the index the stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn single_gray<F: Real>(model: &ColorizationModel, gray: &GrayImage) -> Result<Tensor<F>> {
    let s = model.config.input_size;
    if (gray.width(), gray.height()) != (s, s) {
        return Err(Error::Shape(format!(
            "gray input is {}x{}, model expects {s}x{s}",
            gray.width(),
            gray.height()
        )));
    }
    gray_batch(&[gray])
}

/// Raster-scan sampling of the chroma canvas at generator resolution. The
/// condition and its per-layer projections are computed once; each pixel
/// then costs one generator pass over the partially filled canvas.
pub fn sample_chroma<F: Real>(
    model: &ColorizationModel,
    params: &ParamStore<F>,
    gray: &GrayImage,
    opts: SampleOptions,
    index: usize,
) -> Result<QuantizedChroma> {
    check_temperature(opts.temperature)?;
    let x = single_gray::<F>(model, gray)?;
    let biases: Vec<Tensor<F>> = {
        let mut g = Graph::inference(params);
        let xv = g.input(x);
        let cond = model.condition(&mut g, xv, false)?.condition.expect("condition");
        let vars = model.generator.condition_biases(&mut g, cond)?;
        vars.into_iter().map(|v| g.value(v).clone()).collect()
    };
    raster_sample(model, opts, index, |canvas| {
        let mut g = Graph::inference(params);
        let t = g.input(canvas.clone());
        let b: Vec<Var> = biases.iter().map(|b| g.input(b.clone())).collect();
        let out = model.generator.forward_with_biases(&mut g, t, &b)?;
        Ok(g.value(out).clone())
    })
}

/// [`sample_chroma`] without any reuse: the whole network runs for every pixel.
pub fn sample_chroma_uncached<F: Real>(
    model: &ColorizationModel,
    params: &ParamStore<F>,
    gray: &GrayImage,
    opts: SampleOptions,
    index: usize,
) -> Result<QuantizedChroma> {
    check_temperature(opts.temperature)?;
    let x = single_gray::<F>(model, gray)?;
    raster_sample(model, opts, index, |canvas| {
        let mut g = Graph::inference(params);
        let (xv, t) = (g.input(x.clone()), g.input(canvas.clone()));
        let out = model.forward(&mut g, xv, t)?;
        Ok(g.value(out.generator.expect("generator")).clone())
    })
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

fn raster_sample<F: Real>(
    model: &ColorizationModel,
    opts: SampleOptions,
    index: usize,
    mut step: impl FnMut(&Tensor<F>) -> Result<Tensor<F>>,
) -> Result<QuantizedChroma> {
    let n = model.config.generator_size();
    let dmol = model.config.dmol();
    let mut rng = sample_rng(opts.seed, index);
    let mut canvas = Tensor::<F>::zeros(&[2, 1, n, n]);
    let mut a = vec![0u16; n * n];
    let mut b = vec![0u16; n * n];
    for i in 0..n * n {
        let params = DmolParams::new(dmol.components, step(&canvas)?)?;
        let (ia, ib) = dmol_sample_pixel(&params, &dmol, i, opts.temperature, &mut rng);
        a[i] = ia;
        b[i] = ib;
        canvas.set4(0, 0, i / n, i % n, F::c(bin_center(ia as usize, dmol.bins)));
        canvas.set4(1, 0, i / n, i % n, F::c(bin_center(ib as usize, dmol.bins)));
    }
    QuantizedChroma::new(n, n, dmol.bins, a, b)
}

/// `count` colorizations of `gray`: sampled chroma, upsampled to the input
/// resolution and recombined with the given luminance. Sample `i` depends
/// only on `(seed, i)`.
pub fn sample_image<F: Real>(
    model: &ColorizationModel,
    params: &ParamStore<F>,
    gray: &GrayImage,
    opts: SampleOptions,
    count: usize,
) -> Result<Vec<LabImage>> {
    (0..count)
        .map(|i| {
            let q = sample_chroma(model, params, gray, opts, i)?;
            let chroma = resize_chroma(&dequantize_ab(&q), gray.height(), gray.width())?;
            LabImage::recombine(gray, &chroma)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize, seed: u64) -> (Generator, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = Generator::build(&mut ParamBuilder::new(&mut store, &mut rng), layers, 6, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += (rng.random::<f64>() - 0.5) * 0.5;
            }
        }
        (gen, store)
    }

    fn run(gen: &Generator, store: &ParamStore<f64>, target: &Tensor<f64>, cond: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::inference(store);
        let t = g.input(target.clone());
        let c = g.input(cond.clone());
        let out = gen.forward(&mut g, t, c).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn causal_for_every_depth() {
        let (h, w) = (5, 6);
        for layers in 1..=4 {
            let (gen, store) = setup(layers, layers as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let target = Tensor::from_vec(&[2, 1, h, w], (0..2 * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap();
            let cond = Tensor::from_vec(&[5, 1, h, w], (0..5 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
            let base = run(&gen, &store, &target, &cond);
            for j in [0, 7, 13, h * w - 1] {
                let mut t2 = target.clone();
                t2.set4(1, 0, j / w, j % w, 0.77);
                let out = run(&gen, &store, &t2, &cond);
                for c in 0..12 {
                    for i in 0..h * w {
                        let (a, b) = (base.at4(c, 0, i / w, i % w), out.at4(c, 0, i / w, i % w));
                        if i <= j {
                            assert_eq!(a.to_bits(), b.to_bits(), "layers {layers} j {j} i {i}");
                        }
                    }
                }
                if j + 1 < h * w {
                    assert_ne!(base, out, "layers {layers}: perturbation at {j} had no effect");
                }
            }
        }
    }

    #[test]
    fn zero_inputs_give_finite_output() {
        let (gen, store) = setup(2, 3);
        let out = run(&gen, &store, &Tensor::zeros(&[2, 2, 8, 8]), &Tensor::zeros(&[5, 2, 8, 8]));
        assert_eq!(out.shape(), &[12, 2, 8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn mismatched_condition_is_rejected() {
        let (gen, store) = setup(2, 3);
        let mut g = Graph::inference(&store);
        let t = g.input(Tensor::zeros(&[2, 1, 8, 8]));
        let c = g.input(Tensor::zeros(&[5, 1, 4, 4]));
        assert!(gen.forward(&mut g, t, c).is_err());
        let c = g.input(Tensor::zeros(&[3, 1, 8, 8]));
        assert!(gen.forward(&mut g, t, c).is_err());
    }

    #[test]
    fn fusion_modes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ft = FeatureTransform::build(&mut ParamBuilder::new(&mut store, &mut rng), 3, 4);
        let mut g = Graph::inference(&store);
        let emb_t = Tensor::from_vec(&[4, 1, 2, 2], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let emb = g.input(emb_t.clone());
        let seg = g.input(Tensor::full(&[3, 1, 2, 2], 0.5));
        let c = fuse_condition(&mut g, emb, Some(seg), FusionMode::Concat, None).unwrap();
        assert_eq!(g.value(c).shape(), &[7, 1, 2, 2]);
        assert!((g.value(c).at4(5, 0, 1, 1) - 1.0 / 3.0).abs() < 1e-12);
        let f = fuse_condition(&mut g, emb, Some(seg), FusionMode::FeatureTransform, Some(&ft)).unwrap();
        assert_eq!(g.value(f), &emb_t);
        let e = fuse_condition(&mut g, emb, None, FusionMode::EmbeddingOnly, None).unwrap();
        assert_eq!(g.value(e), &emb_t);
        assert!(fuse_condition(&mut g, emb, None, FusionMode::Concat, None).is_err());
        assert_eq!(FusionMode::Concat.condition_channels(160, 21), 181);
        assert_eq!("feature_transform".parse::<FusionMode>().unwrap(), FusionMode::FeatureTransform);
        assert!("film".parse::<FusionMode>().is_err());
    }
}
