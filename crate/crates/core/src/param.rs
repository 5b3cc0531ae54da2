use crate::error::{Error, Result};
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::Tensor;

/// Trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad }
    }
}

/// Ordered collection of parameters; the index is the identity used on tapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`; returned vars are indexed like the store.
    pub fn bind(&self, tape: &mut GradTape) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.value.clone()))
            .collect()
    }

    /// `grad += g` for every parameter reached by the sweep.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.params() {
            self.params[i].grad.add_assign(g);
        }
    }

    pub fn accumulate_tensors(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.grad.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_then_zero() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::full(&[2], 3.0));
        for _ in 0..2 {
            let mut tape = GradTape::new();
            let vars = store.bind(&mut tape);
            let s = tape.sum(vars[0]);
            store.accumulate(&tape.backward(s).unwrap());
        }
        assert_eq!(store.get(0).grad.data(), &[2.0, 2.0]);
        store.zero_grad();
        assert!(store.get(0).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(0).grad.shape(), store.get(0).value.shape());
    }
}
