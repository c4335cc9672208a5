use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, keeping names. Shapes must match exactly.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has shape {:?}, got {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Records every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.values.iter().map(|v| tape.var(v.clone())).collect())
    }

    /// Records every parameter as a constant (no gradient) on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
        )
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Xavier/Glorot uniform initialisation for a `fan_in × fan_out` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}
