use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Initialization rule of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`, for weights feeding a ReLU.
    KaimingRelu { fan_in: usize },
    /// Uniform with bound `sqrt(3 / fan_in)`.
    KaimingLinear { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub(crate) fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn sample<T: Real, R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        let uniform = |bound: f64, rng: &mut R| {
            let u = Uniform::new_inclusive(-bound, bound);
            Tensor::from_fn(&self.shape, |_| T::of(u.sample(rng)))
        };
        match self.init {
            Init::KaimingRelu { fan_in } => uniform((6.0 / fan_in as f64).sqrt(), rng),
            Init::KaimingLinear { fan_in } => uniform((3.0 / fan_in as f64).sqrt(), rng),
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&self.shape, |_| T::of(dist.sample(rng)))
            }
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, T::one()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn from_params(params: Vec<Param<T>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(Self { params, index })
    }

    pub fn init<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        Self::from_params(
            specs
                .iter()
                .map(|s| Param {
                    name: s.name.clone(),
                    tensor: s.sample(rng),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.params[i].tensor)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
