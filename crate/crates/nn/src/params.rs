use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// A named tensor owned by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    /// Non-learned state (e.g. batch-norm running statistics). Never
    /// trainable and excluded from parameter counts.
    pub buffer: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// One row of a parameter report.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamCount {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            buffer: false,
        });
        Ok(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let i = self.add(name, tensor, false)?;
        self.params[i].buffer = true;
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        Ok(&self.params[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        let i = self.index_of(name)?;
        Ok(&mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.buffer && trainable {
            return Err(NnError::Invalid(format!("buffer `{name}` cannot be trainable")));
        }
        p.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn report(&self) -> Vec<ParamCount> {
        self.params
            .iter()
            .filter(|p| !p.buffer)
            .map(|p| ParamCount {
                name: p.name.clone(),
                count: p.tensor.len(),
                trainable: p.trainable,
            })
            .collect()
    }

    pub fn count(&self, trainable: Option<bool>) -> usize {
        self.params
            .iter()
            .filter(|p| !p.buffer && trainable.is_none_or(|t| p.trainable == t))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    buffer: p.buffer,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Flat copy of all trainable values in store order.
    pub fn trainable_values(&self) -> Vec<T> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    pub fn set_trainable_values(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }
}

/// Gradients indexed like the [`ParamStore`] they were computed for.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, i: usize) -> Option<&[T]> {
        self.grads.get(i).and_then(|g| g.as_deref())
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore<T>, name: &str) -> Result<Option<&'a [T]>> {
        Ok(self.get(store.index_of(name)?))
    }

    /// Flat gradient over trainable parameters (zeros where absent).
    pub fn trainable_flat(&self, store: &ParamStore<T>) -> Vec<T> {
        let mut out = Vec::new();
        for (i, p) in store.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            match self.get(i) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), p.tensor.len())),
            }
        }
        out
    }

    /// Elementwise sum, used for deterministic accumulation across shards.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.iter_mut().zip(y).for_each(|(p, &q)| *p = *p + q),
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
    }
}

/// A forward/backward pass over a [`Graph`] with parameters bound lazily
/// from a store. Frozen parameters enter the graph as constants.
pub struct Session<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads: true,
        }
    }

    /// Session that binds every parameter as a constant (no gradients).
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self {
            track_grads: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self.store.index_of(name)?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let p = self.store.by_index(i);
        let v = self.g.leaf(p.tensor.clone(), self.track_grads && p.trainable);
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).ok().and_then(|i| self.bound[i])
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.g.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).map(|s| s.to_vec())))
            .collect();
        Ok(Gradients { grads })
    }
}
