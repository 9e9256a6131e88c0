use std::ops::Index;

use crate::error::{mismatch, Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// A named trainable value together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    /// Biases and normalization parameters: no layer-wise adaptation, no weight decay.
    pub exempt: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>, exempt: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            value,
            grad,
            trainable: true,
            exempt,
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    params: Vec<Parameter<T>>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, exempt: bool) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.params.push(Parameter::new(value, exempt));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter in `g`. Trainable parameters become gradient
    /// leaves when `track` is set, everything else becomes a constant.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if track && p.trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Overwrites each parameter's gradient with the adjoint found in `grads`
    /// (zero where the parameter did not influence the root).
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => p.grad.data_mut().copy_from_slice(g.data()),
                None => p.grad.data_mut().fill(T::zero()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Same table in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                    exempt: p.exempt,
                })
                .collect(),
        }
    }

    /// Replaces the value of `name`, checking its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| TensorError::InvalidArgument {
            op: "set_value",
            reason: format!("unknown parameter {name}"),
        })?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(mismatch("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Keeps the first `n` parameters.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            names: self.names[..n].to_vec(),
            params: self.params[..n].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_keep_value_shape() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::ones([2, 3]), false);
        let b = store.add("b", Tensor::zeros([3]), true);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, true);
        let x = g.constant(Tensor::ones([1, 2]));
        let y = g.matmul(x, bound[w]).unwrap();
        let y = g.add(y, bound[b]).unwrap();
        let s = g.sum(y, &[], false).unwrap();
        let grads = g.backward(s).unwrap();
        store.store_grads(&bound, &grads);
        for (_, p) in store.iter() {
            assert_eq!(p.grad.shape(), p.value.shape());
        }
        assert_eq!(store.get(b).grad.data(), &[1.0; 3]);
        assert!(store.get(b).exempt);
    }

    #[test]
    fn set_value_rejects_wrong_shape() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::ones([2]), false);
        assert!(store.set_value("w", Tensor::ones([3])).is_err());
        assert!(store.set_value("missing", Tensor::ones([2])).is_err());
        store.set_value("w", Tensor::zeros([2])).unwrap();
    }
}
