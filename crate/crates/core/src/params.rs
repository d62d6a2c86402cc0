//! Named parameter storage and its binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Every learnable tensor of the model, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        let tensor = if tensor.requires_grad { tensor } else { tensor.tracked() };
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), tensor));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].1),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for ((_, t), g) in self.entries.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                t.accumulate_grad(g);
            }
        }
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic initializer: weights ~ U(−√(1/fan_in), +√(1/fan_in)).
pub struct ParamBuilder {
    params: ModelParams,
    rng: ChaCha8Rng,
    precision: Precision,
}

impl ParamBuilder {
    pub fn new(seed: u64, precision: Precision) -> Self {
        Self {
            params: ModelParams::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            precision,
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = libm::sqrt(1.0 / fan_in.max(1) as f64);
        let precision = self.precision;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| precision.round(rng.random_range(-bound..=bound)));
        self.params.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name, Tensor::full(shape, 1.0));
    }

    pub fn finish(self) -> ModelParams {
        self.params
    }
}

/// Gradients per parameter, aligned with [`ModelParams`] order.
#[derive(Debug, Clone)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.0.get(index).and_then(|g| g.as_deref())
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    bound: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ModelParams, tape: Tape) -> Self {
        Self {
            tape,
            params,
            bound: alloc::vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    /// Leaf for parameter `name`, registered on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.tape.param(&self.params.entries[i].1);
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn backward(self, loss: Var) -> Result<ParamGrads> {
        let bound = self.bound;
        let grads = self.tape.backward(loss)?;
        Ok(ParamGrads(
            bound
                .iter()
                .map(|b| b.and_then(|v| grads.get(v).map(<[f64]>::to_vec)))
                .collect(),
        ))
    }
}
