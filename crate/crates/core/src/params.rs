//! Named learnable parameters and their gradient buffers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(alloc::format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Xavier-uniform `rows x cols` matrix.
    pub fn insert_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = libm::sqrt(6.0 / (rows + cols) as f64);
        self.insert_uniform(name, &[rows, cols], bound, rng)
    }

    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value with the same-named tensor from `other`.
    /// Names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::contract(alloc::format!("missing parameter `{name}`")))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::contract(alloc::format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Gradient accumulator, one optional buffer per parameter.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(params: &ParamSet) -> Self {
        GradBuffer {
            grads: alloc::vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64], scale: f64) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += scale * b),
            None => *slot = Some(grad.iter().map(|g| scale * g).collect()),
        }
    }

    /// Adds another buffer into this one.
    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g, 1.0);
            }
        }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum();
        libm::sqrt(sq)
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.grads
                .iter_mut()
                .flatten()
                .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}
