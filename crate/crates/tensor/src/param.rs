//! Named parameter storage and a scoped builder that initializes it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on duplicate names, which would mean two
    /// layers were built under the same scope.
    pub fn insert(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::ParamShape {
                name: e.name.clone(),
                expected: e.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Initialization schemes, named after their PyTorch counterparts.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`: PyTorch's default for conv
    /// weights and biases.
    DefaultUniform { fan_in: usize },
    /// Kaiming uniform for ReLU, fan-in mode: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// Builds a [`ParamStore`] under dotted name scopes.
pub struct Builder<T> {
    store: ParamStore<T>,
    prefix: Vec<String>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            prefix: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Runs `f` with `name` appended to the current scope.
    pub fn scope<R>(&mut self, name: impl ToString, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn param(&mut self, leaf: &str, shape: &[usize], init: Init) -> ParamId {
        let value = self.sample(shape, init);
        let name = self.full_name(leaf);
        self.store.insert(name, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.insert(name, value, ParamKind::Buffer)
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Tensor<T> {
        let bound = match init {
            Init::Zeros => return Tensor::zeros(shape),
            Init::Ones => return Tensor::ones(shape),
            Init::DefaultUniform { fan_in } => 1.0 / (fan_in as f64).sqrt(),
            Init::KaimingUniform { fan_in } => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}
