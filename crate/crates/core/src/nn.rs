//! Parameter storage and the linear layer shared by the model components.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
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
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, keeping names; shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    v.shape(),
                    self.values[i].shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Records parameters as constants, for evaluation without gradients.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order (zeros where nothing flowed).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Affine map over the last axis: `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weights uniform in `[-1/sqrt(input), 1/sqrt(input)]`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[input, output], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.get(self.weight))?;
        Ok(y.add_broadcast(p.get(self.bias))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_and_init_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut rng);
        assert!(store.get(lin.weight).data().iter().all(|w| w.abs() <= 0.5));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::ones(&[2, 5, 4]));
        assert_eq!(lin.forward(&p, x).unwrap().shape(), vec![2, 5, 3]);
    }

    #[test]
    fn load_values_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]));
        assert!(store.load_values(vec![Tensor::zeros(&[3])]).is_err());
        assert!(store.load_values(vec![Tensor::ones(&[2])]).is_ok());
        assert_eq!(store.find("a").map(ParamId::index), Some(0));
    }
}
