//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns parameter gradients. Loss nodes
//! compute their input gradient eagerly during the forward pass.

use std::rc::Rc;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{concat_channels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor<F>>),
    Gate(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    Loss {
        input: Var,
        grad: Option<Tensor<F>>,
    },
    WeightedSum(Vec<(Var, F)>),
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    trainable: Vec<bool>,
    grad_enabled: bool,
    nodes: Vec<Node<F>>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p, F: Real> Graph<'p, F> {
    /// Graph in which every parameter receives gradients.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            trainable: vec![true; params.len()],
            grad_enabled: true,
            nodes: Vec::new(),
        }
    }

    /// Graph in which only parameters accepted by `trainable` receive gradients.
    pub fn with_trainable(params: &'p ParamStore<F>, trainable: impl Fn(ParamId) -> bool) -> Self {
        Self {
            params,
            trainable: params.ids().map(trainable).collect(),
            grad_enabled: true,
            nodes: Vec::new(),
        }
    }

    /// Forward-only graph; no gradient bookkeeping.
    pub fn inference(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            trainable: vec![false; params.len()],
            grad_enabled: false,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.grad_enabled && self.trainable[id.0],
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        self.push(out, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let out = va.zip_map(vb, |p, q| p + q);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let out = va.zip_map(vb, |p, q| p * q);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor (e.g. a convolution mask).
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor<F>>) -> Var {
        let out = self.value(a).zip_map(&c, |p, q| p * q);
        let rg = self.requires_grad(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// Gated activation: `tanh(first half) * sigmoid(second half)` over channels.
    pub fn gate(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (c2, n, h, w) = v.dims4();
        assert!(c2 % 2 == 0, "gate needs an even channel count, got {c2}");
        let half = c2 / 2 * n * h * w;
        let d = v.data();
        let out: Vec<F> = (0..half)
            .map(|i| F::c(d[i].f64().tanh() * sigmoid(d[half + i].f64())))
            .collect();
        let out = Tensor::from_vec(&[c2 / 2, n, h, w], out).expect("gate shape");
        let rg = self.requires_grad(a);
        self.push(out, Op::Gate(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_channels(&vals)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Softmax across the channel axis of a 4-d activation.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let out = softmax_channels(self.value(a));
        let rg = self.requires_grad(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Record a scalar loss whose gradient with respect to `input` was
    /// computed alongside its value.
    pub fn loss(&mut self, input: Var, value: F, grad: Option<Tensor<F>>) -> Var {
        let rg = self.requires_grad(input) && grad.is_some();
        self.push(Tensor::scalar(value), Op::Loss { input, grad }, rg)
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let total = terms
            .iter()
            .map(|&(v, w)| w * self.value(v).data()[0])
            .fold(F::zero(), |a, b| a + b);
        let rg = terms.iter().any(|&(v, w)| self.requires_grad(v) && w != F::zero());
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let mut grads = Grads::new(self.params.len());
        let mut node_grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return grads;
        }
        node_grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, t: Tensor<F>, node_grads: &mut Vec<Option<Tensor<F>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut node_grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, g),
                Op::Conv { x, w, b, geom } => {
                    let cg = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        *geom,
                        &g,
                        self.requires_grad(*x),
                        self.requires_grad(*w),
                        b.is_some_and(|b| self.requires_grad(b)),
                    );
                    if let Some(t) = cg.input {
                        send(*x, t, &mut node_grads);
                    }
                    if let Some(t) = cg.weight {
                        send(*w, t, &mut node_grads);
                    }
                    if let (Some(b), Some(t)) = (b, cg.bias) {
                        send(*b, t, &mut node_grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone(), &mut node_grads);
                    send(*a, g, &mut node_grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_map(vb, |p, q| p * q), &mut node_grads);
                    send(*b, g.zip_map(va, |p, q| p * q), &mut node_grads);
                }
                Op::MulConst(a, c) => send(*a, g.zip_map(c, |p, q| p * q), &mut node_grads),
                Op::Gate(a) => {
                    let v = self.value(*a);
                    let half = v.numel() / 2;
                    let d = v.data();
                    let gd = g.data();
                    let mut out = vec![F::zero(); v.numel()];
                    for j in 0..half {
                        let t = d[j].f64().tanh();
                        let s = sigmoid(d[half + j].f64());
                        let gj = gd[j].f64();
                        out[j] = F::c(gj * s * (1.0 - t * t));
                        out[half + j] = F::c(gj * t * s * (1.0 - s));
                    }
                    send(*a, Tensor::from_vec(v.shape(), out).expect("gate grad"), &mut node_grads);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).dims4().0;
                        send(p, g.channel_slice(start, c), &mut node_grads);
                        start += c;
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    send(*a, softmax_channels_backward(y, &g), &mut node_grads);
                }
                Op::Loss { input, grad } => {
                    if let Some(lg) = grad {
                        let mut t = lg.clone();
                        t.scale_assign(g.data()[0]);
                        send(*input, t, &mut node_grads);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if w != F::zero() {
                            send(v, Tensor::scalar(g.data()[0] * w), &mut node_grads);
                        }
                    }
                }
            }
        }
        grads
    }
}

pub fn softmax_channels<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (c, n, h, w) = x.dims4();
    let plane = n * h * w;
    let d = x.data();
    let mut out = vec![F::zero(); d.len()];
    for p in 0..plane {
        let mx = (0..c).map(|ch| d[ch * plane + p]).fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for ch in 0..c {
            let e = (d[ch * plane + p] - mx).exp();
            out[ch * plane + p] = e;
            z += e;
        }
        for ch in 0..c {
            out[ch * plane + p] /= z;
        }
    }
    Tensor::from_vec(x.shape(), out).expect("softmax shape")
}

fn softmax_channels_backward<F: Real>(y: &Tensor<F>, g: &Tensor<F>) -> Tensor<F> {
    let (c, n, h, w) = y.dims4();
    let plane = n * h * w;
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![F::zero(); yd.len()];
    for p in 0..plane {
        let dot: F = (0..c).map(|ch| yd[ch * plane + p] * gd[ch * plane + p]).sum();
        for ch in 0..c {
            let k = ch * plane + p;
            out[k] = yd[k] * (gd[k] - dot);
        }
    }
    Tensor::from_vec(y.shape(), out).expect("softmax grad shape")
}
