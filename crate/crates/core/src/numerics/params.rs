use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Named parameters with Adam moment buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let n = tensor.numel();
        self.moments
            .insert(name.clone(), (vec![T::zero(); n], vec![T::zero(); n]));
        self.params.insert(name, tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .accumulate_grad(grad)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: T) {
        for p in self.params.values_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * factor);
            }
        }
    }

    /// Moment buffers for `name`: `(m, v)`.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Same parameters converted to another precision; moments reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in &self.params {
            out.insert(name.clone(), t.cast());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// One bias-corrected Adam update at learning rate `lr`; gradients are cleared
/// afterwards. Parameters without a gradient are left untouched (their task
/// was absent from the batch) and their names are returned.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, cfg: AdamConfig) -> Vec<String> {
    store.step += 1;
    let t = store.step as f64;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powf(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powf(t));
    let eps = T::from_f64_lossy(cfg.eps);
    let lr = T::from_f64_lossy(lr);
    let one = T::one();
    let mut skipped = Vec::new();
    for (name, param) in store.params.iter_mut() {
        let Some(grad) = param.take_grad() else {
            skipped.push(name.clone());
            continue;
        };
        let (m, v) = store
            .moments
            .get_mut(name)
            .expect("moments are created with the parameter");
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    if !skipped.is_empty() {
        warn!(
            "adam step {}: {} parameter(s) without gradient left unchanged",
            store.step,
            skipped.len()
        );
    }
    skipped
}
