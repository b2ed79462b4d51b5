//! The full network: backbone branches, condition fusion and generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{gray_batch, Backbone, ModelConfig};
use crate::colorspace::GrayImage;
use crate::data::SegMap;
use crate::error::Result;
use crate::generator::{fuse_condition, FeatureTransform, FusionMode, Generator};
use crate::graph::{Graph, Var};
use crate::nn::ParamBuilder;
use crate::params::ParamStore;
use crate::real::Real;

/// Parameter groups, the first segment of every parameter name.
pub const GROUPS: [&str; 6] = ["trunk", "embed", "seg", "aux", "fuse", "gen"];

#[derive(Clone, Debug, PartialEq)]
pub struct ColorizationModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub transform: Option<FeatureTransform>,
    pub generator: Generator,
}

/// Graph nodes of one forward pass; absent parts were not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct Outputs {
    pub trunk: Option<Var>,
    pub embedding: Option<Var>,
    pub aux: Option<Var>,
    pub seg_logits: Option<Var>,
    pub condition: Option<Var>,
    pub generator: Option<Var>,
}

impl ColorizationModel {
    /// Build the architecture and freshly initialized parameters.
    pub fn new<F: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let backbone = Backbone::build(&mut b, config)?;
        let transform = (config.fusion_mode == FusionMode::FeatureTransform)
            .then(|| FeatureTransform::build(&mut b.sub("fuse"), config.num_classes, config.embedding_channels));
        let generator = Generator::build(
            &mut b,
            config.generator_layers,
            config.generator_channels,
            config.fusion_mode.condition_channels(config.embedding_channels, config.num_classes),
            config.dmol().channels(),
        );
        let model = Self {
            config: config.clone(),
            backbone,
            transform,
            generator,
        };
        Ok((model, store))
    }

    /// Trunk, embedding, segmentation and fused condition for `gray`
    /// (`[1, N, S, S]`). Segmentation is skipped when the fusion mode does not use it
    /// and `with_seg` is false.
    pub fn condition<F: Real>(&self, g: &mut Graph<'_, F>, gray: Var, with_seg: bool) -> Result<Outputs> {
        let trunk = self.backbone.trunk_forward(g, gray)?;
        let emb = self.backbone.embed(g, trunk)?;
        let mode = self.config.fusion_mode;
        let seg = if with_seg || mode.uses_segmentation() {
            Some(self.backbone.segment(g, trunk)?)
        } else {
            None
        };
        let cond = fuse_condition(g, emb, seg, mode, self.transform.as_ref())?;
        Ok(Outputs {
            trunk: Some(trunk),
            embedding: Some(emb),
            seg_logits: seg,
            condition: Some(cond),
            ..Outputs::default()
        })
    }

    /// Everything: auxiliary head, segmentation, and the teacher-forced generator.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, gray: Var, target: Var) -> Result<Outputs> {
        let mut out = self.condition(g, gray, true)?;
        out.aux = Some(self.backbone.aux_color_head(g, out.embedding.expect("embedding")));
        out.generator = Some(self.generator.forward(g, target, out.condition.expect("condition"))?);
        Ok(out)
    }

    /// Trunk and segmentation only.
    pub fn segment<F: Real>(&self, g: &mut Graph<'_, F>, gray: Var) -> Result<Outputs> {
        let trunk = self.backbone.trunk_forward(g, gray)?;
        let seg = self.backbone.segment(g, trunk)?;
        Ok(Outputs {
            trunk: Some(trunk),
            seg_logits: Some(seg),
            ..Outputs::default()
        })
    }

    /// Per-pixel argmax class at the segmentation resolution, one map per input.
    pub fn predict_segmentation<F: Real>(&self, params: &ParamStore<F>, gray: &[&GrayImage]) -> Result<Vec<SegMap>> {
        let mut g = Graph::inference(params);
        let x = g.input(gray_batch(gray)?);
        let seg = self.segment(&mut g, x)?.seg_logits.expect("segmentation");
        let logits = g.value(seg);
        let (c, n, h, w) = logits.dims4();
        (0..n)
            .map(|i| {
                let labels = (0..h * w)
                    .map(|p| {
                        let score = |k: usize| logits.at4(k, i, p / w, p % w);
                        (0..c).fold(0, |best, k| if score(k) > score(best) { k } else { best }) as u8
                    })
                    .collect();
                SegMap::new(w, h, labels)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn parameter_groups_are_known() {
        for mode in FusionMode::ALL {
            let cfg = ModelConfig {
                fusion_mode: mode,
                ..ModelConfig::desk(4)
            };
            let (_, store) = ColorizationModel::new::<f32>(&cfg, 0).unwrap();
            assert!(store.ids().all(|id| GROUPS.contains(&store.group(id))));
            assert_eq!(store.ids().any(|id| store.group(id) == "fuse"), mode == FusionMode::FeatureTransform);
        }
    }

    #[test]
    fn fresh_feature_transform_matches_embedding_only() {
        let base = ModelConfig::desk(4);
        let ft_cfg = ModelConfig {
            fusion_mode: FusionMode::FeatureTransform,
            ..base.clone()
        };
        let eo_cfg = ModelConfig {
            fusion_mode: FusionMode::EmbeddingOnly,
            ..base
        };
        let (ft, ft_store) = ColorizationModel::new::<f32>(&ft_cfg, 3).unwrap();
        let (eo, eo_store) = ColorizationModel::new::<f32>(&eo_cfg, 3).unwrap();
        let x = Tensor::from_vec(&[1, 1, 32, 32], (0..1024).map(|i| ((i as f32) * 0.37).sin()).collect()).unwrap();
        let t = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|i| ((i as f32) * 0.11).cos() * 0.5).collect()).unwrap();
        let run = |m: &ColorizationModel, s: &ParamStore<f32>| {
            let mut g = Graph::inference(s);
            let (xv, tv) = (g.input(x.clone()), g.input(t.clone()));
            let out = m.forward(&mut g, xv, tv).unwrap();
            g.value(out.generator.unwrap()).clone()
        };
        // identical seeds draw identical values: the zero-initialized transform consumes no randomness
        assert_eq!(run(&ft, &ft_store), run(&eo, &eo_store));
    }
}
