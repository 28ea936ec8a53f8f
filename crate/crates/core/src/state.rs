//! Named parameter storage and the SGD update.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// All learnable parameters, addressed by name or by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, frozen: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            frozen,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|id| &self.params[id.0])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Allocate zeroed gradient buffers for every trainable parameter.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.frozen {
                p.tensor.grad = None;
            } else {
                p.tensor.zero_grad();
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Bitwise equality of all parameter values.
    pub fn bit_eq(&self, other: &ModelState) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

/// He-normal initialised conv weight `[out, in, k, k]`.
pub fn he_conv_weight(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let fan_in = (in_ch * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(&[out_ch, in_ch, k, k], |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `p <- p - lr * grad` on trainable parameters; gradients are reset to zero afterwards.
///
/// Frozen parameters are never touched, even when a gradient buffer is present.
pub fn sgd_step(state: &mut ModelState, lr: f64) -> Result<()> {
    if let Some(p) = state
        .params
        .iter()
        .find(|p| !p.frozen && p.tensor.grad.is_none())
    {
        return Err(Error::State(format!("missing gradient for {}", p.name)));
    }
    for p in state.params.iter_mut() {
        if p.frozen {
            continue;
        }
        let grad = p.tensor.grad.take().expect("checked above");
        if lr != 0.0 {
            for (v, g) in p.tensor.data_mut().iter_mut().zip(&grad) {
                *v -= lr * g;
            }
        }
        p.tensor.grad = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(value: f64, grad: f64, frozen: bool) -> ModelState {
        let mut s = ModelState::new();
        let id = s.register("p", Tensor::scalar(value), frozen).unwrap();
        s.param_mut(id).tensor.grad = Some(vec![grad]);
        s
    }

    #[test]
    fn sgd_scalar_update() {
        let mut s = scalar_state(1.0, 2.0, false);
        sgd_step(&mut s, 0.1).unwrap();
        assert!((s.params()[0].tensor.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.params()[0].tensor.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut s = scalar_state(1.0, 2.0, false);
        let before = s.clone();
        sgd_step(&mut s, 0.0).unwrap();
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut s = scalar_state(1.0, 5.0, true);
        let before = s.clone();
        sgd_step(&mut s, 0.5).unwrap();
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn sgd_missing_gradient_is_state_error() {
        let mut s = ModelState::new();
        s.register("w", Tensor::scalar(1.0), false).unwrap();
        assert!(matches!(sgd_step(&mut s, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ModelState::new();
        s.register("a", Tensor::scalar(0.0), false).unwrap();
        assert!(s.register("a", Tensor::scalar(0.0), false).is_err());
    }
}
