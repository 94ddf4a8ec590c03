//! Named weight storage and the Adam optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::error::{NnError, Result};
use super::tensor::Scalar;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a weight inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
    /// Non-trainable entries (batchnorm running statistics) are skipped by Adam.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Every weight of a model with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    id: u64,
    version: u64,
    step: u64,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            step: 0,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<T>, trainable: bool) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(NnError::Config(format!(
                "weight `{name}`: shape {shape:?} needs {n} values, got {}",
                value.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(NnError::Config(format!("duplicate weight name `{name}`")));
        }
        let zeros = vec![T::zero(); n];
        self.index.insert(name.to_owned(), self.params.len());
        self.params.push(Param {
            name: name.to_owned(),
            shape: shape.to_vec(),
            value,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    /// Bumped whenever weight values change; forward caches record it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    /// Mutable weight access; invalidates outstanding forward caches.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        self.version += 1;
        &mut self.params[id.0].value
    }

    /// Running statistics update; does not invalidate caches.
    pub(crate) fn buffer_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].grad
    }

    /// Value and gradient of the same weight at once.
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&[T], &mut [T]) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    /// Flat copy of all trainable values in declaration order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().filter(|p| p.trainable).flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Flat copy of all trainable gradients in declaration order.
    pub fn flat_grads(&self) -> Vec<T> {
        self.params.iter().filter(|p| p.trainable).flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Address a trainable scalar by its position in [`ParamStore::flat_values`].
    pub fn flat_locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            if flat < p.len() {
                return Some((ParamId(i), flat));
            }
            flat -= p.len();
        }
        None
    }

    /// One Adam update with bias correction; gradients are zeroed afterwards.
    ///
    /// Fails before touching any weight if a gradient is non-finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let next = self.step + 1;
        for p in self.params.iter().filter(|p| p.trainable) {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient { step: next, name: p.name.clone() });
            }
        }
        self.step = next;
        self.version += 1;
        let t = next as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one, lr, eps) = (T::one(), T::of(cfg.lr), T::of(cfg.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Copy of the store in another precision (moments reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let params = self
            .params
            .iter()
            .map(|p| {
                let value: Vec<U> = p.value.iter().map(|v| U::of(v.as_f64())).collect();
                let zeros = vec![U::zero(); value.len()];
                Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value,
                    grad: zeros.clone(),
                    m: zeros.clone(),
                    v: zeros,
                    trainable: p.trainable,
                }
            })
            .collect();
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            step: self.step,
            params,
            index: self.index.clone(),
        }
    }
}
