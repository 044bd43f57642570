use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{Scalar, Tape, Tensor, Var};

/// Index of a parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub(crate) fn push(&mut self, name: String, t: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a tape leaf; the returned vars are indexed
    /// like the store.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Replaces values by name, checking that every parameter is present
    /// with identical dims.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut map: std::collections::HashMap<String, Tensor<T>> = entries.into_iter().collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let v = map
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
            if v.dims() != t.dims() {
                return Err(shape_err!("parameter {name}: checkpoint {:?}, model {:?}", v.dims(), t.dims()));
            }
            *t = v;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }
}

/// Creates named parameters with deterministic initialisation.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, name: String, dims: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(dims.to_vec(), bound, self.rng);
        self.store.push(name, t)
    }

    pub fn constant(&mut self, name: String, dims: &[usize], v: f32) -> ParamId {
        self.store.push(name, Tensor::full(dims.to_vec(), v))
    }
}
