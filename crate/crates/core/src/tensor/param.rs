use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of parameters. Indices are stable for the store's
/// lifetime and are what model layouts refer to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Leaf gradients for `bound`, zero-filled where a parameter did not
    /// reach the loss.
    pub fn collect_grads(&self, bound: &[Var<'_>], grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(bound)
            .map(|(p, v)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// `grad += scale * g` for each parameter, in index order.
    pub fn accumulate(&mut self, grads: &[Tensor], scale: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("accumulate", p.value.shape(), g.shape()));
            }
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            slot.data_mut().iter_mut().zip(g.data()).for_each(|(s, x)| *s += scale * x);
        }
        Ok(())
    }
}
