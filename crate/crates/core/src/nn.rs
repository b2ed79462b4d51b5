//! Convolution layers, gated residual blocks and parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::ConvGeom;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// How a convolution's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `1 / fan_in`.
    VarianceScaling,
    Zeros,
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, F, R> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, F: Real, R: Rng> ParamBuilder<'a, F, R> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder whose names are nested under `name`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, F, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::VarianceScaling => {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| F::c(normal.sample(self.rng)))
                    .collect();
                Tensor::from_vec(shape, data).expect("init shape")
            }
        };
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom, init: Init) -> Conv {
        let mut sub = self.sub(name);
        let weight = sub.tensor("weight", &[cout, cin, geom.kernel, geom.kernel], init);
        let bias = sub.tensor("bias", &[cout], Init::Zeros);
        Conv {
            weight,
            bias,
            geom,
            cin,
            cout,
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.geom)
    }

    /// Forward with the weight multiplied elementwise by a constant mask.
    pub fn forward_masked<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, mask: &std::rc::Rc<Tensor<F>>) -> Var {
        let w = g.param(self.weight);
        let wm = g.mul_const(w, mask.clone());
        let b = g.param(self.bias);
        g.conv2d(x, wm, Some(b), self.geom)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Residual unit `y = x + W_out * (tanh(u) . sigmoid(v))` where `[u; v]` is a
/// dilated 3x3 convolution of `x` to twice the channels and `W_out` is a
/// dilated 3x3 convolution back to the input width. `W_out` starts at zero,
/// so a freshly built block is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedResBlock {
    pub conv_gate: Conv,
    pub conv_out: Conv,
    pub channels: usize,
    pub dilation: usize,
}

impl GatedResBlock {
    pub fn build<F: Real, R: Rng>(b: &mut ParamBuilder<'_, F, R>, name: &str, channels: usize, dilation: usize) -> Self {
        let mut sub = b.sub(name);
        let geom = ConvGeom::same(3, dilation);
        let conv_gate = sub.conv("conv_gate", channels, 2 * channels, geom, Init::VarianceScaling);
        let conv_out = sub.conv("conv_out", channels, channels, geom, Init::Zeros);
        Self {
            conv_gate,
            conv_out,
            channels,
            dilation,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.conv_gate.forward(g, x);
        let gated = g.gate(h);
        let update = self.conv_out.forward(g, gated);
        g.add(x, update)
    }
}

/// A convolution followed by a run of gated residual blocks at one width.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: Conv,
    pub blocks: Vec<GatedResBlock>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn build<F: Real, R: Rng>(
        b: &mut ParamBuilder<'_, F, R>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        num_blocks: usize,
        dilation: usize,
    ) -> Self {
        let mut sub = b.sub(name);
        let conv = sub.conv("conv", cin, cout, geom, Init::VarianceScaling);
        let blocks = (0..num_blocks)
            .map(|i| GatedResBlock::build(&mut sub, &format!("block{i}"), cout, dilation))
            .collect();
        Self { conv, blocks }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(g, x);
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        Ok(h)
    }
}
