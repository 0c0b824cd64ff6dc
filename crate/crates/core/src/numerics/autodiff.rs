//! Named-parameter gradient evaluation and the finite-difference oracle.

use super::tape::{BufId, Tape};
use super::tensor::Tensor;
use super::NumericsError;

/// Ordered name -> tensor map. Order is insertion order and is preserved by
/// every operation, so checkpoints and gradient walks are deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Params {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(
            self.get(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), tensor.with_grad()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameter name -> tape buffer bindings for one forward build.
pub struct ParamBindings {
    bindings: Vec<(String, BufId)>,
}

impl ParamBindings {
    pub fn from_pairs(bindings: Vec<(String, BufId)>) -> ParamBindings {
        ParamBindings { bindings }
    }

    pub fn get(&self, name: &str) -> Result<BufId, NumericsError> {
        self.bindings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }
}

/// A scalar-valued composition of tape primitives over named parameters.
pub type GradFn<'a> = &'a dyn Fn(&mut Tape, &ParamBindings) -> Result<BufId, NumericsError>;

/// Evaluate `f` and its gradient with respect to every parameter.
///
/// The returned gradients mirror the parameter names and shapes; parameters
/// the output does not depend on get zero gradients.
pub fn value_and_grad(params: &Params, f: GradFn) -> Result<(f64, Params), NumericsError> {
    let mut tape = Tape::new();
    let bindings = ParamBindings {
        bindings: params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.param(t)))
            .collect(),
    };
    let loss_id = f(&mut tape, &bindings)?;
    let numel = tape.value(loss_id).len();
    if numel != 1 {
        return Err(NumericsError::NonScalarOutput { numel });
    }
    let value = tape.scalar_value(loss_id);
    let grads = tape.backward(loss_id)?;
    let mut out = Params::new();
    for ((name, tensor), (_, id)) in params.entries.iter().zip(&bindings.bindings) {
        let g = match grads.get(*id) {
            Some(g) => Tensor::new(tensor.shape().to_vec(), g.to_vec())?,
            None => Tensor::zeros(tensor.shape().to_vec()),
        };
        out.insert(name, g);
    }
    Ok((value, out))
}

/// Central finite differences of `f` over every parameter element.
///
/// Test oracle only: O(#elements) forward evaluations.
pub fn finite_difference_gradient(
    params: &Params,
    f: GradFn,
    eps: f64,
) -> Result<Params, NumericsError> {
    let eval = |p: &Params| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let bindings = ParamBindings {
            bindings: p
                .iter()
                .map(|(name, t)| (name.to_string(), tape.param(t)))
                .collect(),
        };
        let loss_id = f(&mut tape, &bindings)?;
        let numel = tape.value(loss_id).len();
        if numel != 1 {
            return Err(NumericsError::NonScalarOutput { numel });
        }
        Ok(tape.scalar_value(loss_id))
    };

    let mut out = Params::new();
    for (name, tensor) in params.iter() {
        let mut grad = vec![0.0; tensor.numel()];
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            grad[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        }
        out.insert(name, Tensor::new(tensor.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Max over all elements of |a-b| / max(1e-6, |a|, |b|).
pub fn max_relative_error(a: &Params, b: &Params) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, ta), (_, tb)) in a.entries.iter().zip(&b.entries) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
