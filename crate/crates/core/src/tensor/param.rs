use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct Parameter {
    /// Dotted path, e.g. `attn.search.0.query`.
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, name-unique collection of a model's parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Tensor> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        if !tensor.requires_grad() {
            return Err(Error::contract(format!("parameter `{name}` does not track gradients")));
        }
        self.params.push(Parameter {
            name,
            tensor: tensor.clone(),
            trainable: true,
        });
        Ok(tensor)
    }

    /// Glorot-uniform initialised `fan_in × fan_out` matrix.
    pub fn glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
        self.add(name, Tensor::parameter(&[fan_in, fan_out], data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, Tensor::parameter(shape, vec![0.0; n])?)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, Tensor::parameter(shape, vec![1.0; n])?)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// `(name, tensor)` pairs in registration order, as consumed by
    /// [`grad_check`](super::grad_check).
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    pub fn count(&self) -> ParamCount {
        let breakdown: Vec<(String, usize)> = self.params.iter().map(|p| (p.name.clone(), p.tensor.len())).collect();
        ParamCount {
            total: breakdown.iter().map(|(_, n)| n).sum(),
            breakdown,
        }
    }
}
