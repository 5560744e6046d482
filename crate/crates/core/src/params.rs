use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors. Names are dotted paths such as
/// `decoder.0.mixer.spatial.channel_gen.w`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

/// Initialisation rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    Uniform(f64, f64),
}

impl Init {
    pub fn fill(self, dims: &[usize], rng: &mut Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(dims.to_vec()),
            Init::Ones => Tensor::full(dims.to_vec(), 1.0),
            Init::Constant(c) => Tensor::full(dims.to_vec(), c),
            Init::Normal(std) => Tensor::from_fn(dims.to_vec(), |_| std * rng.normal()),
            Init::Uniform(lo, hi) => Tensor::from_fn(dims.to_vec(), |_| rng.uniform_range(lo, hi)),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(tensor.dims().to_vec());
        self.params.push(Parameter { name: name.clone(), tensor, grad });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn init(&mut self, name: impl Into<String>, dims: &[usize], init: Init, rng: &mut Rng) -> Result<ParamId> {
        let t = init.fill(dims, rng);
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Replaces a parameter value; the new tensor must keep the dims.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.dims() != tensor.dims() {
            return Err(Error::Shape(format!(
                "{}: dims {:?} cannot take {:?}",
                p.name,
                p.tensor.dims(),
                tensor.dims()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }
}
