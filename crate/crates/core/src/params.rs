use std::collections::BTreeMap;

use controlsr_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::store::{Checkpoint, Stage, TensorRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named tensors with per-tensor trainable flags, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::validation("parameter", format!("duplicate name {name:?}")));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::validation("parameter", format!("missing tensor {name:?}")))
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |n| n.starts_with(prefix))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Re-flags every tensor with `rule(name)`.
    pub fn set_trainable_by(&mut self, rule: impl Fn(&str) -> bool) {
        for (n, p) in self.params.iter_mut() {
            p.trainable = rule(n);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(n, p)| (n.clone(), Param { value: p.value.cast(), trainable: p.trainable })).collect(),
        }
    }

    pub fn to_checkpoint(&self, stage: Stage, rng_seed: u64, meta: String) -> Checkpoint {
        let mut c = Checkpoint::new(stage, rng_seed);
        c.meta = meta;
        c.records = self
            .params
            .iter()
            .map(|(n, p)| TensorRecord {
                name: n.clone(),
                dims: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                trainable: p.trainable,
            })
            .collect();
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut store = Self::new();
        for r in &c.records {
            let t = Tensor::from_vec(&r.dims, r.data.iter().map(|&v| T::of(v as f64)).collect())?;
            store.insert(r.name.clone(), t, r.trainable)?;
        }
        Ok(store)
    }

    /// Largest absolute change of any frozen tensor between `self` and `after`.
    pub fn max_frozen_change(&self, after: &Self) -> f64 {
        self.params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| match after.params.get(n) {
                Some(q) => p.value.max_abs_diff(&q.value).unwrap_or(f64::INFINITY),
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}
