//! Named model parameters with a stable registration order.
//!
//! Layers allocate their tensors here at construction time and keep only
//! [`ParamId`] handles; the store clones every value onto a fresh tape at
//! each step (`stage`), the optimizer walks values and staged gradients in
//! lockstep, and checkpoints serialize entries in registration order.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Truncated-normal(0, std) initialization clipped at two standard deviations.
    pub fn add_trunc_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut SplitMix64,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.trunc_normal(std, 2.0)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::ONE))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Clone every parameter onto `tape` as a leaf. With `trainable`, leaves
    /// request gradients and `Staged::grad` can read them back after
    /// `backward`.
    pub fn stage(&self, tape: &mut Tape<T>, trainable: bool) -> Staged {
        let ids = self
            .values
            .iter()
            .map(|v| {
                let mut t = v.clone();
                t.requires_grad = trainable;
                t.grad = None;
                tape.leaf(t)
            })
            .collect();
        Staged { ids }
    }

    /// Replace parameter values from `(name, tensor)` pairs; every store
    /// entry must be present with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in named {
            let id = self
                .lookup(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            let current = &self.values[id.0];
            if current.shape() != value.shape() {
                return Err(Error::dim(format!(
                    "tensor `{name}` has shape {:?} but the model expects {:?}",
                    value.shape(),
                    current.shape()
                )));
            }
            self.values[id.0] = value.clone();
        }
        if named.len() != self.values.len() {
            let provided: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
            let missing: Vec<&str> = self
                .names
                .iter()
                .map(String::as_str)
                .filter(|n| !provided.contains(n))
                .collect();
            return Err(Error::Config(format!("missing parameters: {missing:?}")));
        }
        Ok(())
    }
}

/// Tape leaf ids of one staging pass, indexable by [`ParamId`].
pub struct Staged {
    ids: Vec<TensorId>,
}

impl Staged {
    /// Adopt leaf ids staged by other means; position `i` answers for
    /// `ParamId(i)`.
    pub fn from_ids(ids: Vec<TensorId>) -> Self {
        Staged { ids }
    }

    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_marks_leaves_trainable() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 1.0));
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, true);
        assert_eq!(tape.data(staged.id(a)), &[1.0, 1.0]);
        let x = staged.id(a);
        let sq = crate::tensor::ops::mul(&mut tape, x, x).unwrap();
        let loss = crate::tensor::ops::sum_all(&mut tape, sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn load_named_validates_shapes_and_coverage() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        store.add("b", Tensor::zeros(&[2]));
        let bad = vec![("w".to_string(), Tensor::zeros(&[3, 2]))];
        let err = store.load_named(&bad).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        let partial = vec![("w".to_string(), Tensor::zeros(&[2, 2]))];
        assert!(store.load_named(&partial).is_err());
        let full = vec![
            ("w".to_string(), Tensor::full(&[2, 2], 1.0)),
            ("b".to_string(), Tensor::full(&[2], 2.0)),
        ];
        store.load_named(&full).unwrap();
        assert_eq!(store.value(store.lookup("b").unwrap()).data(), &[2.0, 2.0]);
    }
}
