//! Named parameter storage and binding of parameters onto a graph.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove_prefix_matching(&mut self, pred: impl Fn(&str) -> bool) {
        self.map.retain(|k, _| !pred(k));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPolicy {
    /// Inference: nothing is differentiated.
    Frozen,
    /// Base pretraining: every parameter.
    All,
    /// Personalization: style cross-attention projections and the mapping network only.
    FineTune,
}

impl TrainPolicy {
    pub fn is_trainable(self, name: &str) -> bool {
        match self {
            TrainPolicy::Frozen => false,
            TrainPolicy::All => !name.starts_with("text."),
            TrainPolicy::FineTune => is_fine_tune_param(name),
        }
    }
}

/// `*.sca.*` or `vgm.*`.
pub fn is_fine_tune_param(name: &str) -> bool {
    name.starts_with("vgm.") || name.contains(".sca.")
}

/// Lazily places named parameters on a graph, once each.
pub struct Binder<'a> {
    sets: Vec<&'a ParamSet>,
    policy: TrainPolicy,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(sets: &[&'a ParamSet], policy: TrainPolicy) -> Self {
        Self {
            sets: sets.to_vec(),
            policy,
            bound: BTreeMap::new(),
        }
    }

    /// Makes `name` resolve to an existing graph node instead of a fresh leaf.
    pub fn substitute(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn get<F: Scalar>(&mut self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .sets
            .iter()
            .find_map(|s| s.get(name))
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let v = g.leaf(t.cast::<F>(), self.policy.is_trainable(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Gradients of every bound, trainable parameter after `backward`.
    pub fn gradients<F: Scalar>(&self, g: &Graph<F>) -> BTreeMap<String, Tensor<f32>> {
        self.bound
            .iter()
            .filter(|(_, &v)| g.requires_grad(v))
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t.cast::<f32>())))
            .collect()
    }
}
