//! Named parameter storage with persistent gradient slots.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic generator used for every initialisation and sampling step.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform_tensor(rng: &mut SeededRng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named tensors.
///
/// `version` increases whenever a value changes, so caches derived
/// from parameters can detect staleness.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    version: u64,
}

/// Parameters of one store registered on a tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Wraps variables given in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        self.version += 1;
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        self.version += 1;
        Ok(())
    }

    /// Registers every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients of one backward pass into the persistent slots.
    pub fn accumulate(&mut self, bound: &BoundParams<'_>, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.grad = p.grad.zip_map(g, |a, b| a + b).expect("gradient matches parameter shape");
            }
        }
    }

    /// Adds raw gradient tensors, in store order.
    pub fn accumulate_tensors(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = p.grad.zip_map(g, |a, b| a + b)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }
}
