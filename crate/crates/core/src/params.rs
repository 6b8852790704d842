use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State that is checkpointed but never receives gradients
    /// (batchnorm running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform {
        fan_in: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
    grad: Vec<f64>,
    velocity: Vec<f64>,
    has_grad: bool,
}

impl Param {
    pub fn grad(&self) -> Option<&[f64]> {
        self.has_grad.then_some(self.grad.as_slice())
    }
}

/// Named parameters in registration order, plus the generator that
/// initialized them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    rng: ChaCha8Rng,
}

/// Top-level owner of a parameter, taken from the first path segment.
pub fn owner(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), params: Vec::new(), index: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Registers a parameter, drawing its initial value from the store's
    /// generator. Draw order is registration order.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / sqrt(fan_in.max(1) as f64);
                (0..numel).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?, kind)
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.names.push(name.to_string());
        self.params.push(Param { value, kind, grad: vec![0.0; n], velocity: vec![0.0; n], has_grad: false });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.id(name)?.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// `(name, param)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.value.numel()).sum()
    }

    /// Mutable access to two buffers at once (running mean and variance).
    pub fn buffers_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.params.split_at_mut(b.0);
            (lo[a.0].value.data_mut(), hi[0].value.data_mut())
        } else {
            let (lo, hi) = self.params.split_at_mut(a.0);
            (hi[0].value.data_mut(), lo[b.0].value.data_mut())
        }
    }

    /// Adds the gradients of every parameter that appears on `tape`.
    /// Gradients accumulate until [`ParamStore::zero_grad`] or a step.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (id, var) in tape.param_vars() {
            let p = &mut self.params[id.0];
            if let Some(g) = grads.get(var) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            p.has_grad = true;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.has_grad = false;
        }
    }

    pub fn set_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        p.grad.copy_from_slice(grad);
        p.has_grad = true;
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self { momentum: 0.9 }
    }
}

impl Sgd {
    /// Updates every trainable parameter, then zeroes all gradients.
    /// Fails without touching anything when a trainable parameter received
    /// no gradient since the last step.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.kind == ParamKind::Trainable && !p.has_grad) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        for p in store.params.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
            let Param { value, grad, velocity, .. } = p;
            for ((w, g), v) in value.data_mut().iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
            if !value.data().iter().all(|w| w.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        store.zero_grad();
        Ok(())
    }
}
