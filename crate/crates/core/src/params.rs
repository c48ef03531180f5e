//! Named parameter storage and seeded initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Graph, Real, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a gradient-receiving leaf of `g`.
    pub fn attach(&self, g: &mut Graph<F>) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Registers every parameter as a constant of `g` (inference).
    pub fn attach_frozen(&self, g: &mut Graph<F>) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Element-type conversion of every parameter.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles of a [`ParamStore`]'s tensors, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Handles in [`ParamId`] order, e.g. leaves created by a caller.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform in `±sqrt(6 / fan_in)` (He-uniform); values drawn in `f64` so the
/// same seed yields the same parameters at either precision.
pub fn he_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

/// Uniform in `±bound`.
pub fn uniform<F: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let data = (0..numel(shape)).map(|_| F::from_f64(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(store.add("a", Tensor::zeros(&[3])), Err(Error::Config(_))));
        assert_eq!(store.count(), 2);
    }

    #[test]
    fn same_seed_gives_identical_values_in_both_precisions() {
        let a: Tensor<f64> = he_uniform(&[4, 5], 20, &mut ChaCha8Rng::seed_from_u64(3));
        let b: Tensor<f32> = he_uniform(&[4, 5], 20, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.cast::<f32>(), b);
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= bound));
    }
}
