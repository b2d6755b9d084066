use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Named parameters with gradient accumulators of matching shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.values.insert(name.to_string(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name);
        self.values.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `grads` (keyed by parameter name) into the accumulators.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let acc = self
                .grads
                .get_mut(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown parameter `{name}`")))?;
            if acc.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for `{name}`: {:?} vs {:?}",
                    g.shape(),
                    acc.shape()
                )));
            }
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor> {
        &self.grads
    }

    pub fn is_finite(&self) -> bool {
        self.values.values().all(Tensor::is_finite)
    }

    /// Normal init with the given standard deviation.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    /// Glorot-scaled normal init for a `[fan_in, fan_out]` weight.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.init_normal(name, &[fan_in, fan_out], std, rng);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }
}
