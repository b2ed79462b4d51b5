//! Shared trunk, color-embedding branch, segmentation branch with ASPP, and
//! the auxiliary mixture head on the embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{GrayImage, DEFAULT_BINS};
use crate::conv::ConvGeom;
use crate::dmol::{DmolConfig, DEFAULT_COMPONENTS, DEFAULT_LOG_SCALE_MIN};
use crate::error::{Error, Result};
use crate::generator::FusionMode;
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Init, ParamBuilder, Stage};
use crate::real::Real;
use crate::tensor::Tensor;

/// Dilation rates of the three parallel ASPP convolutions.
pub const ASPP_DILATIONS: [usize; 3] = [6, 12, 18];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Width of the first trunk stage; every width scales by `base_channels / 64`.
    pub base_channels: usize,
    pub num_classes: usize,
    pub mixture_components: usize,
    pub embedding_channels: usize,
    pub fusion_mode: FusionMode,
    pub generator_layers: usize,
    pub generator_channels: usize,
    pub bins: usize,
    pub log_scale_min: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(21)
    }
}

impl ModelConfig {
    /// Full-size network on 128x128 inputs.
    pub fn paper(num_classes: usize) -> Self {
        Self {
            input_size: 128,
            base_channels: 64,
            num_classes,
            mixture_components: DEFAULT_COMPONENTS,
            embedding_channels: 160,
            fusion_mode: FusionMode::Concat,
            generator_layers: 4,
            generator_channels: 128,
            bins: DEFAULT_BINS,
            log_scale_min: DEFAULT_LOG_SCALE_MIN,
        }
    }

    /// Same topology at a quarter of the width on 32x32 inputs.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            input_size: 32,
            base_channels: 16,
            embedding_channels: 40,
            generator_layers: 2,
            generator_channels: 32,
            ..Self::paper(num_classes)
        }
    }

    /// A paper-scale channel count `c` at this configuration's width.
    pub fn scaled(&self, c: usize) -> usize {
        (c * self.base_channels / 64).max(1)
    }

    /// Trunk widths of the four stages.
    pub fn trunk_channels(&self) -> [usize; 4] {
        [64, 128, 256, 512].map(|c| self.scaled(c))
    }

    pub fn generator_size(&self) -> usize {
        self.input_size / 4
    }

    pub fn dmol(&self) -> DmolConfig {
        DmolConfig {
            components: self.mixture_components,
            bins: self.bins,
            log_scale_min: self.log_scale_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return bad("input_size", "must be a positive multiple of 4");
        }
        for (key, v) in [
            ("base_channels", self.base_channels),
            ("num_classes", self.num_classes),
            ("mixture_components", self.mixture_components),
            ("embedding_channels", self.embedding_channels),
            ("generator_layers", self.generator_layers),
            ("generator_channels", self.generator_channels),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1");
            }
        }
        if self.num_classes > 255 {
            return bad("num_classes", "must be <= 255 (255 is the ignore label)");
        }
        if self.bins < 2 || self.bins > u16::MAX as usize + 1 {
            return bad("bins", "must be in [2, 65536]");
        }
        if !self.log_scale_min.is_finite() {
            return bad("log_scale_min", "must be finite");
        }
        Ok(())
    }
}

/// Which part of the network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Shared,
    Embedding,
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 convolution with the given stride.
    Conv3x3 { stride: usize },
    ResidualBlocks { count: usize },
    Add,
}

/// One row of the architecture description, read off the built network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub branch: Branch,
    pub kind: LayerKind,
    /// Output side length in pixels.
    pub resolution: usize,
    pub channels: usize,
    /// `None` for an undilated layer.
    pub dilation: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub trunk: Vec<Stage>,
    pub embed: Stage,
    pub embed_out: Conv,
    pub seg: Stage,
    pub aspp: Vec<Conv>,
    pub aux: Conv,
}

impl Backbone {
    /// Registers parameters under the groups `trunk`, `embed`, `seg` and `aux`.
    pub fn build<F: Real, R: Rng>(b: &mut ParamBuilder<'_, F, R>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.trunk_channels();
        let mut t = b.sub("trunk");
        let trunk = vec![
            Stage::build(&mut t, "stage0", 1, c1, ConvGeom::same(3, 1), 2, 1),
            Stage::build(&mut t, "stage1", c1, c2, ConvGeom::down2(), 2, 1),
            Stage::build(&mut t, "stage2", c2, c3, ConvGeom::down2(), 2, 1),
            Stage::build(&mut t, "stage3", c3, c4, ConvGeom::same(3, 1), 3, 2),
        ];
        let mut e = b.sub("embed");
        let embed = Stage::build(&mut e, "stage", c4, c4, ConvGeom::same(3, 1), 3, 4);
        let embed_out = e.conv("out", c4, config.embedding_channels, ConvGeom::same(3, 1), Init::VarianceScaling);
        let mut s = b.sub("seg");
        let seg = Stage::build(&mut s, "stage", c4, c4, ConvGeom::same(3, 1), 3, 2);
        let aspp = ASPP_DILATIONS
            .iter()
            .map(|&d| s.conv(&format!("aspp{d}"), c4, config.num_classes, ConvGeom::same(3, d), Init::VarianceScaling))
            .collect();
        let aux = b.sub("aux").conv(
            "head",
            config.embedding_channels,
            config.dmol().channels(),
            ConvGeom::same(1, 1),
            Init::VarianceScaling,
        );
        Ok(Self {
            config: config.clone(),
            trunk,
            embed,
            embed_out,
            seg,
            aspp,
            aux,
        })
    }

    /// Shared features at a quarter of the input resolution. `gray` is
    /// `[1, N, S, S]` luminance normalized to `[-1, 1]`.
    pub fn trunk_forward<F: Real>(&self, g: &mut Graph<'_, F>, gray: Var) -> Result<Var> {
        let s = self.config.input_size;
        let shape = g.value(gray).shape();
        if shape.len() != 4 || shape[0] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("trunk expects [1, N, {s}, {s}], got {shape:?}")));
        }
        let mut h = gray;
        for stage in &self.trunk {
            h = stage.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn embed<F: Real>(&self, g: &mut Graph<'_, F>, trunk_out: Var) -> Result<Var> {
        let h = self.embed.forward(g, trunk_out)?;
        Ok(self.embed_out.forward(g, h))
    }

    /// Segmentation logits: the sum of the three ASPP branches.
    pub fn segment<F: Real>(&self, g: &mut Graph<'_, F>, trunk_out: Var) -> Result<Var> {
        self.segment_with_branches(g, trunk_out, &[true; 3])
    }

    /// [`Backbone::segment`] with individual ASPP branches switched off.
    pub fn segment_with_branches<F: Real>(&self, g: &mut Graph<'_, F>, trunk_out: Var, enabled: &[bool; 3]) -> Result<Var> {
        let h = self.seg.forward(g, trunk_out)?;
        let mut sum: Option<Var> = None;
        for (conv, _) in self.aspp.iter().zip(enabled).filter(|(_, &on)| on) {
            let branch = conv.forward(g, h);
            sum = Some(match sum {
                Some(acc) => g.add(acc, branch)?,
                None => branch,
            });
        }
        sum.ok_or_else(|| Error::InvalidArgument("at least one ASPP branch must be enabled".into()))
    }

    /// Mixture parameters predicted from the embedding alone.
    pub fn aux_color_head<F: Real>(&self, g: &mut Graph<'_, F>, emb: Var) -> Var {
        self.aux.forward(g, emb)
    }

    /// Per-layer description of both branches, derived from the built layers.
    pub fn layer_table(&self) -> Vec<LayerRow> {
        let mut rows = Vec::new();
        let mut res = self.config.input_size;
        let stage_rows = |branch, stage: &Stage, res: &mut usize, rows: &mut Vec<LayerRow>| {
            *res = stage.conv.geom.out_size(*res);
            rows.push(conv_row(branch, &stage.conv, *res));
            if let Some(first) = stage.blocks.first() {
                rows.push(LayerRow {
                    branch,
                    kind: LayerKind::ResidualBlocks {
                        count: stage.blocks.len(),
                    },
                    resolution: *res,
                    channels: first.channels,
                    dilation: (first.dilation > 1).then_some(first.dilation),
                });
            }
        };
        for stage in &self.trunk {
            stage_rows(Branch::Shared, stage, &mut res, &mut rows);
        }
        let shared_res = res;
        stage_rows(Branch::Embedding, &self.embed, &mut res, &mut rows);
        rows.push(conv_row(Branch::Embedding, &self.embed_out, res));
        let mut res = shared_res;
        stage_rows(Branch::Segmentation, &self.seg, &mut res, &mut rows);
        for conv in &self.aspp {
            rows.push(conv_row(Branch::Segmentation, conv, res));
        }
        rows.push(LayerRow {
            branch: Branch::Segmentation,
            kind: LayerKind::Add,
            resolution: res,
            channels: self.config.num_classes,
            dilation: None,
        });
        rows
    }
}

fn conv_row(branch: Branch, conv: &Conv, resolution: usize) -> LayerRow {
    LayerRow {
        branch,
        kind: LayerKind::Conv3x3 {
            stride: conv.geom.stride,
        },
        resolution,
        channels: conv.cout,
        dilation: (conv.geom.dilation > 1).then_some(conv.geom.dilation),
    }
}

/// Normalized luminance of a batch as a `[1, N, H, W]` tensor.
pub fn gray_batch<F: Real>(images: &[&GrayImage]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Shape("gray images differ in size".into()));
        }
        data.extend(img.normalized().into_iter().map(F::c));
    }
    Tensor::from_vec(&[1, images.len(), h, w], data)
}
