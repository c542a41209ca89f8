use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every trainable tensor of a model in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers a tensor with entries drawn from `Normal(0, std^2)`.
    pub fn register_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite positive std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.register(name, value)
    }

    pub fn get(&self, id: ParamId) -> Result<&Parameter, AutodiffError> {
        self.params
            .get(id.0)
            .ok_or_else(|| AutodiffError::Index(format!("unknown parameter id {}", id.0)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Parameter, AutodiffError> {
        self.params
            .get_mut(id.0)
            .ok_or_else(|| AutodiffError::Index(format!("unknown parameter id {}", id.0)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<(), AutodiffError> {
        let p = self.get_mut(id)?;
        if p.grad.shape() != g.shape() {
            return Err(AutodiffError::Shape(format!(
                "gradient for {} has shape {:?}, expected {:?}",
                p.name,
                g.shape(),
                p.grad.shape()
            )));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
