//! Networks: the enhancement generator, the Wasserstein critic and the fixed
//! matched-filter vessel segmenter.
//!
//! Trainable networks keep their weights in a [`ParamSet`]. A forward pass
//! binds the set onto a [`Graph`] (one node per tensor, in order) and then
//! records the layers against those nodes.

mod critic;
mod generator;
mod segmenter;

pub use critic::{ConvCritic, Critic, CriticSpec, LinearCritic};
pub use generator::{Generator, GeneratorSpec, AffineGenerator, ResidualGenerator};
pub use segmenter::{Segmenter, SegmenterSpec};

use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::rng;

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Copies values from `other`, checking that names and shapes line up.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter sets have different layouts".into()));
        }
        for ((dst, src), name) in self.tensors.iter_mut().zip(&other.tensors).zip(&self.names) {
            if dst.shape() != src.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Builds a conv layer `name.w` / `name.b` with He-normal weights scaled by
/// `gain` and zero biases.
pub(crate) fn push_conv(
    p: &mut ParamSet,
    s: &mut rng::Stream,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    gain: f64,
) {
    let fan_in = (ci * k * k) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    let w: Vec<f64> = (0..co * ci * k * k).map(|_| std * rng::normal(s)).collect();
    p.push(format!("{name}.w"), Tensor::new(vec![co, ci, k, k], w).expect("sized"));
    p.push(format!("{name}.b"), Tensor::zeros(&[co]));
}

/// Walks bound parameter nodes in declaration order.
pub(crate) struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(ids: &'a [NodeId]) -> Self {
        Self { ids, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Result<NodeId> {
        let id = self.ids.get(self.pos).copied().ok_or_else(|| {
            Error::Contract(format!("parameter list ended after {} tensors", self.pos))
        })?;
        self.pos += 1;
        Ok(id)
    }

    pub(crate) fn pair(&mut self) -> Result<(NodeId, NodeId)> {
        Ok((self.next()?, self.next()?))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.ids.len() {
            return Err(Error::Contract(format!(
                "{} parameter tensors given, {} used",
                self.ids.len(),
                self.pos
            )));
        }
        Ok(())
    }
}

/// Runs `gen` with fixed parameters on one image.
pub fn enhance<G: Generator>(gen: &G, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.tensors().iter().map(|t| g.constant(t.clone())).collect();
    let xn = g.constant(x.clone());
    let y = gen.forward(&mut g, &ids, xn)?;
    Ok(g.value(y).clone())
}
