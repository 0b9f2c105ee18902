use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }
}

/// Named parameter set. Iteration is in name order, which keeps checkpoints and
/// optimizer updates deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Copies every parameter under `prefix` from `other`, replacing existing entries.
    pub fn merge_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (name, p) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.params.insert(name.clone(), p.clone());
        }
    }

    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    /// Replaces values from a loaded map; every stored parameter must be present with a matching shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn grad_norm(&self, prefix: &str) -> f32 {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| (p.grad.norm() as f64).powi(2))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
    }
}

/// Binds store parameters into a graph, creating each leaf at most once.
pub struct ParamBinder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'a> ParamBinder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        ParamBinder {
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.value(name)?.clone();
        let v = g.leaf(value, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` for `name` instead of a fresh leaf, e.g. to differentiate with respect to
    /// a parameter supplied from outside.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Names and graph handles of everything bound so far.
    pub fn into_bindings(self) -> Vec<(String, Var)> {
        self.bound.into_iter().collect()
    }
}

impl ParamStore {
    /// Adds leaf gradients from a finished backward pass into the store.
    pub fn accumulate_grads(&mut self, g: &Graph, bindings: &[(String, Var)]) {
        for (name, var) in bindings {
            if let (Some(p), Some(grad)) = (self.params.get_mut(name), g.grad(*var)) {
                p.grad.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
}
