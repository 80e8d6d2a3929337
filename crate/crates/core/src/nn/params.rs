use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamStore { tensors }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).unwrap());
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape, v));
    }

    /// SHA-256 over names, shapes and the `f32` bit patterns of all values.
    ///
    /// Values are hashed at `f32` precision, the precision of the on-disk
    /// container, so a store and its reloaded checkpoint share a checksum.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Exact (`f64`) checksum, for bit-identity checks on in-memory stores.
    pub fn checksum_exact(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value to `f32` precision in place.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Binds parameters into a graph lazily, remembering which node holds which name.
pub struct Binder<'a> {
    pub params: &'a ParamStore,
    pub prefix: String,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamStore, trainable: bool) -> Self {
        Self { params, prefix: String::new(), trainable, bound: BTreeMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.params.expect(name).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.get(name).is_some()
    }

    /// Collects gradients of every bound parameter; unbound or untouched
    /// parameters are absent from the map.
    pub fn grads(&self, g: &Graph) -> Grads {
        self.bound
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}
