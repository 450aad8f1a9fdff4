//! Named parameter storage, initialisation and tape binding.

use std::collections::BTreeMap;
use std::rc::Rc;

use msunet_autograd::{Gradients, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Learnable.
    Param,
    /// State updated outside of gradient descent (batch-norm statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub kind: Kind,
    pub trainable: bool,
    pub value: Rc<Tensor<T>>,
}

/// Flat, insertion-ordered parameter table keyed by dotted path.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: String, kind: Kind, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, trainable: kind == Kind::Param, value: Rc::new(value) });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.entries[id.0].value.shape(), "shape change for {}", self.entries[id.0].name);
        self.entries[id.0].value = Rc::new(value);
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let e = &mut self.entries[id.0];
        e.trainable = trainable && e.kind == Kind::Param;
    }

    /// Learnable scalar count (buffers excluded).
    pub fn count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == Kind::Param).map(|e| e.value.len()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Learnable scalars whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == Kind::Param && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Name to trainable flag, for learnable entries.
    pub fn freeze_mask(&self) -> BTreeMap<String, bool> {
        self.entries.iter().filter(|e| e.kind == Kind::Param).map(|e| (e.name.clone(), e.trainable)).collect()
    }

    /// Records every entry on `tape`: trainable parameters as leaves, the
    /// rest as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|e| if e.trainable { tape.leaf_shared(e.value.clone()) } else { tape.constant_shared(e.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, trainable: e.trainable, value: Rc::new(e.value.cast()) })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values for every name present in both stores. Returns the
    /// names of `self` that were not found in `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut missing = Vec::new();
        for e in &mut self.entries {
            match other.index.get(&e.name) {
                Some(&j) if other.entries[j].value.shape() == e.value.shape() => {
                    e.value = other.entries[j].value.clone();
                }
                _ => missing.push(e.name.clone()),
            }
        }
        missing
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Wraps vars already on a tape, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradient per parameter (`None` for frozen entries or no flow).
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Registers parameters under a dotted prefix with seeded initialisation.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let path = self.path(name);
        self.store.insert(path, Kind::Param, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let path = self.path(name);
        self.store.insert(path, Kind::Buffer, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::full(shape, T::one()))
    }

    /// Normal(0, std) truncated to +-2 std by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(self.rng);
                if v.abs() <= 2.0 * std {
                    break T::lit(v);
                }
            })
            .collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data))
    }
}
