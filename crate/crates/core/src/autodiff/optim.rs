use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// A trainable tensor plus optimizer moment buffers (none for plain SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub adam: Option<AdamState>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            adam: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named tensor as stored in checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, tensor));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.values().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from named tensors; every parameter must be present
    /// with an identical shape. Optimizer state is discarded.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (p, n) in self.params.iter_mut().zip(named) {
            if p.name != n.name || p.tensor.shape() != n.shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match parameter {} {:?}",
                    n.name,
                    n.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(n.shape.clone(), n.values.clone())?;
            p.adam = None;
        }
        Ok(())
    }

    /// Stable fingerprint of all parameter values (bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.tensor.shape().hash(&mut h);
            for v in p.tensor.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn fingerprint_of(&self, ids: &[ParamId]) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for &id in ids {
            for v in self.get(id).tensor.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Plain SGD (no momentum, no decay). Grads are zeroed afterwards.
pub fn sgd_step(store: &mut ParamStore, ids: &[ParamId], lr: f64) {
    for &id in ids {
        let t = &mut store.get_mut(id).tensor;
        let Some(grad) = t.grad.take() else { continue };
        for (w, g) in t.values_mut().iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        t.grad = Some(grad);
        t.zero_grad();
    }
}

/// Adam with bias correction. Moment buffers are created on first use.
pub fn adam_step(store: &mut ParamStore, ids: &[ParamId], cfg: AdamConfig) {
    for &id in ids {
        let p = store.get_mut(id);
        let Some(grad) = p.tensor.grad.take() else { continue };
        let n = grad.len();
        let state = p.adam.get_or_insert_with(|| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let values = p.tensor.values.as_mut_slice();
        for i in 0..n {
            let g = grad[i];
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.tensor.grad = Some(grad);
        p.tensor.zero_grad();
    }
}
