//! Named parameter storage with deterministic initialization.
//!
//! Every parameter draws its initial values from an RNG stream derived from
//! (run seed, parameter name) alone, so two models that share a parameter
//! name initialize it identically even when their overall parameter sets
//! differ. Iteration order is lexicographic by name everywhere, which keeps
//! optimizer updates and checkpoints independent of registration order.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Elem, TensorData};

/// RNG stream keyed by (seed, label). FNV-1a over the seed bytes then the
/// label bytes; collisions would only correlate initializations, not break
/// correctness.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(PRIME);
    }
    for &b in label.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(PRIME);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub struct ParamStore<T> {
    map: BTreeMap<String, TensorData<T>>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: TensorData<T>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Param { what: format!("duplicate parameter {name}") });
        }
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TensorData<T>> {
        self.map.get(name).ok_or_else(|| Error::Param { what: format!("unknown parameter {name}") })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorData<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::Param { what: format!("unknown parameter {name}") })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel_total(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Lexicographic by name.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// Gaussian init, mean 0, given standard deviation. Draws are made in
    /// f64 and narrowed, so f32 and f64 stores agree per (seed, name).
    pub fn add_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, seed: u64) -> Result<()> {
        let mut rng = derived_rng(seed, name);
        let dist = Normal::new(0.0f64, std)
            .map_err(|e| Error::Param { what: format!("normal init for {name}: {e}") })?;
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
        self.insert(name, TensorData::new(shape, data)?)
    }

    /// He init for convolution weights: std = sqrt(2 / fan_in).
    pub fn add_he(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) -> Result<()> {
        if fan_in == 0 {
            return Err(Error::Param { what: format!("he init for {name}: zero fan-in") });
        }
        self.add_normal(name, shape, (2.0 / fan_in as f64).sqrt(), seed)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, TensorData::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, TensorData::full(shape, T::ONE))
    }

    /// Widen or narrow every tensor elementwise through f64.
    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.map.insert(name.to_string(), t.cast::<U>());
        }
        out
    }

    /// Leaf every parameter into a graph. With `trainable` unset the graph
    /// treats parameters as constants (inference / probe passes).
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, true)
    }

    pub fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut map = BTreeMap::new();
        for (name, t) in self.iter() {
            map.insert(name.to_string(), g.leaf(t.clone(), trainable));
        }
        Bound { map }
    }
}

/// Name → graph leaf mapping for one forward pass.
pub struct Bound {
    map: BTreeMap<String, Var>,
}

impl Bound {
    /// Assemble a binding from variables created elsewhere, for callers
    /// that manage graph leaves themselves (finite-difference probing).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { map: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Param { what: format!("parameter {name} not bound") })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Read gradients for every bound parameter back out of the graph,
    /// in lexicographic name order.
    pub fn grads<T: Elem>(&self, g: &Graph<T>) -> Vec<(String, Vec<T>)> {
        self.map
            .iter()
            .map(|(name, &v)| {
                let grad = g
                    .grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::ZERO; g.value(v).numel()]);
                (name.clone(), grad)
            })
            .collect()
    }
}
