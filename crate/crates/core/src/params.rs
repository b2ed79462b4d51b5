//! Named parameter tensors and their gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters. Names are dotted paths such as
/// `trunk.block0.conv_a.weight`; the first segment is the parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Group of a parameter: the first segment of its dotted name.
    pub fn group(&self, id: ParamId) -> &str {
        let name = &self.names[id.0];
        name.split('.').next().unwrap_or(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamStore<F>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter name lists differ".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{}: {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` for parameters that did
/// not take part in the graph or were frozen.
#[derive(Clone, Debug)]
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor<F>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}
