use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
///
/// Values are drawn from a generator keyed by `(seed, name)`, so a parameter's
/// initial value does not depend on how many parameters were created before it.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    gain: f64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_gain(seed, 1.0)
    }

    /// Uniform bounds scaled by `gain`.
    pub fn with_gain(seed: u64, gain: f64) -> Self {
        Self {
            seed,
            gain,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Uniform in `[-g/sqrt(fan_in), g/sqrt(fan_in)]`, `g` the store's gain.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = self.gain / (fan_in.max(1) as f64).sqrt();
        let mut rng = param_rng(self.seed, name);
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    /// Returns the existing id for `name`, or creates it with `make`.
    pub fn get_or_insert_with(
        &mut self,
        name: &str,
        make: impl FnOnce(&mut Self) -> Result<ParamId>,
    ) -> Result<ParamId> {
        match self.index.get(name) {
            Some(&i) => Ok(ParamId(i)),
            None => make(self),
        }
    }

    /// Like [`ParamStore::uniform`], but returns the existing entry if `name`
    /// is already registered.
    pub fn shared_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.get_or_insert_with(name, |ps| ps.uniform(name, shape, fan_in))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                self.tensors[i].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies values for every name present in both stores with equal shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let Some(&i) = self.index.get(name) else {
                return Err(Error::ConfigMismatch(format!("unknown parameter {name}")));
            };
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i].data_mut().copy_from_slice(t.data());
        }
        if other.len() != self.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} parameters in source, {} expected",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub(crate) fn from_slots(slots: Vec<Option<Vec<f64>>>) -> Self {
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// `self += other`, slot by slot.
    pub fn add_assign(&mut self, other: &Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Euclidean norm over every slot.
    pub fn norm(&self) -> f64 {
        self.slots.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes())))
}
