//! Named trainable parameters.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies (false for norms and biases).
    pub decay: bool,
}

/// Ordered collection of parameters; names follow `module.stage.block.tensor`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_gaussian<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t = Tensor::new(shape, data).expect("sized from shape");
        self.add(name, t, true)
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        self.add(name, Tensor::full(shape, value), false)
    }

    pub fn set_decay(&mut self, id: ParamId, decay: bool) {
        self.params[id.0].decay = decay;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs that must match this
    /// store's names, order and shapes exactly.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(config_err!(
                "checkpoint holds {} parameters, model expects {}",
                named.len(),
                self.params.len()
            ));
        }
        for (p, (name, t)) in self.params.iter().zip(&named) {
            if p.name != *name || p.tensor.shape() != t.shape() {
                return Err(config_err!(
                    "checkpoint parameter {name} {:?} does not match model parameter {} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                ));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(named) {
            p.tensor = t;
        }
        Ok(())
    }
}
