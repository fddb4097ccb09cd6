//! Named parameter maps and their binding onto a graph.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Ordered map from parameter path to value. Paths are stable across
/// save/load, and iteration order is lexicographic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
}

/// Gradients share the parameter layout.
pub type Grads<S> = ParamStore<S>;

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params
            .insert(name.into(), value.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copy of the entries whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }

    pub fn extend(&mut self, other: ParamStore<S>) {
        self.params.extend(other.params);
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Zero-filled map with the same paths and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// `self += other * factor` over the paths present in `other`.
    pub fn add_scaled(&mut self, other: &ParamStore<S>, factor: S) -> Result<()> {
        for (name, g) in other.iter() {
            let dst = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if dst.shape() != g.shape() {
                return Err(Error::InvalidInput {
                    op: "add_scaled",
                    msg: format!(
                        "`{name}` has shape {:?}, update has {:?}",
                        dst.shape(),
                        g.shape()
                    ),
                });
            }
            for (d, &v) in dst.data_mut().iter_mut().zip(g.data()) {
                *d = *d + v * factor;
            }
        }
        Ok(())
    }

    /// Pushes every parameter onto `graph`. Parameters for which `trainable`
    /// returns false become constants and receive no gradient.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: impl Fn(&str) -> bool) -> Bindings {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            let var = if trainable(name) {
                graph.param(value.clone())
            } else {
                graph.constant(value.clone())
            };
            vars.insert(name.clone(), var);
        }
        Bindings { vars }
    }
}

/// Parameter path to graph node.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound node that requires one, zero-filled where the
    /// root did not reach it.
    pub fn grads<S: Scalar>(&self, graph: &Graph<S>) -> Grads<S> {
        let mut out = ParamStore::new();
        for (name, &var) in &self.vars {
            if !graph.requires_grad(var) {
                continue;
            }
            let shape = graph.value(var).shape().to_vec();
            let grad = match graph.grad(var) {
                Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches its value"),
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), grad);
        }
        out
    }
}

/// Normal draw with the given std, redrawn until it lies within two
/// standard deviations.
pub fn truncated_normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break S::of(z * std);
        }
    })
}

/// `{name}_w` of shape `[fan_in, fan_out]` and a zero `{name}_b`.
pub fn init_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) {
    store.insert(
        format!("{name}_w"),
        truncated_normal(&[fan_in, fan_out], INIT_STD, rng),
    );
    store.insert(format!("{name}_b"), Tensor::zeros(&[fan_out]));
}

/// `{name}_gain` of ones and `{name}_bias` of zeros.
pub fn init_layer_norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) {
    store.insert(format!("{name}_gain"), Tensor::ones(&[dim]));
    store.insert(format!("{name}_bias"), Tensor::zeros(&[dim]));
}
