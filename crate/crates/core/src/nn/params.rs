use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{NnError, Rng, Tensor};

struct Param<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Named trainable parameters plus non-trainable buffers (BatchNorm running
/// statistics, class centers). Iteration order is insertion order.
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    buffers: IndexMap<String, Tensor<T>>,
    step_count: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Step decay: `base * factor^floor(step / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub every: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            factor: 0.95,
            every: 1000,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        self.base * self.factor.powi((step / self.every.max(1)) as i32)
    }
}

/// Learning rate under the default decay (0.001, x0.95 every 1000 steps).
pub fn lr_schedule(step: u64) -> f64 {
    LrSchedule::default().at(step)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let n = value.len();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    /// Uniform(-a, a) weights with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<(), NnError> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-a..a)))
            .collect();
        self.add_param(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NnError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.buffers
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NnError> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|p| p.grad.as_deref())
    }

    pub fn set_grad(&mut self, name: &str, grad: Vec<T>) -> Result<(), NnError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if grad.len() != p.value.len() {
            return Err(NnError::ShapeMismatch(format!("gradient for {name}")));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<(), NnError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if grad.len() != p.value.len() {
            return Err(NnError::ShapeMismatch(format!("gradient for {name}")));
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a += g),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One Adam update with bias correction. Every parameter must hold a
    /// gradient; gradients are cleared afterwards.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<(), NnError> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(NnError::MissingGrad(name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(cfg.eps);
        let one = T::one();
        for p in self.params.values_mut() {
            let grad = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Parameters followed by buffers, in insertion order.
    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .chain(self.buffers.iter().map(|(k, b)| (k.clone(), b.clone())))
            .collect()
    }

    /// Overwrites values by name. Every stored parameter and buffer must be
    /// present with a matching shape; optimizer moments are reset.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<(), NnError> {
        let lookup: IndexMap<&str, &Tensor<T>> = entries.iter().map(|(k, v)| (k.as_str(), v)).collect();
        for (name, p) in self.params.iter_mut() {
            let t = lookup.get(name.as_str()).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(NnError::ShapeMismatch(format!("checkpoint entry {name}")));
            }
            p.value = (*t).clone();
            p.grad = None;
            p.m.iter_mut().for_each(|v| *v = T::zero());
            p.v.iter_mut().for_each(|v| *v = T::zero());
        }
        for (name, b) in self.buffers.iter_mut() {
            let t = lookup.get(name.as_str()).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if t.shape() != b.shape() {
                return Err(NnError::ShapeMismatch(format!("checkpoint entry {name}")));
            }
            *b = (*t).clone();
        }
        Ok(())
    }

    /// Same parameters and buffers in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, p) in &self.params {
            out.add_param(k, p.value.cast()).expect("unique names");
        }
        for (k, b) in &self.buffers {
            out.add_buffer(k, b.cast()).expect("unique names");
        }
        out
    }
}
