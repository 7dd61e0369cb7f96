use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors. Names are hierarchical (`encoder.stage0.block1.dw.weight`)
/// and unique; insertion order is the canonical iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    no_decay: Vec<bool>,
    frozen: HashSet<usize>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, no_decay: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.no_decay.push(no_decay);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Truncated-normal(0, 0.02) init, as used for conv/linear weights.
    pub fn add_weight(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| loop {
                let v = normal.sample(rng);
                if v.abs() <= 0.04 {
                    break v;
                }
            })
            .collect();
        self.insert(name, Tensor::new(shape, data), false)
    }

    /// Parameters excluded from weight decay (biases, norm affine terms, tokens).
    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.insert(name, Tensor::full(shape, value), true)
    }

    pub fn add_tensor(&mut self, name: &str, value: Tensor, no_decay: bool) -> ParamId {
        self.insert(name, value, no_decay)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        !self.no_decay[id.0]
    }

    pub fn set_no_decay(&mut self, id: ParamId, no_decay: bool) {
        self.no_decay[id.0] = no_decay;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&id.0)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        if frozen {
            self.frozen.insert(id.0);
        } else {
            self.frozen.remove(&id.0);
        }
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.set_frozen(ParamId(i), frozen);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// SHA-256 over names, shapes and raw little-endian bytes of every
    /// parameter whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            if !n.starts_with(prefix) {
                continue;
            }
            h.update(n.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrite values from `(name, tensor)` pairs; every stored parameter
    /// must be supplied with a matching shape.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for i in 0..self.names.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{key}`")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    name: key,
                    expected: self.values[i].shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }

    /// Copy every parameter whose name starts with `prefix` from `other`,
    /// matched by name.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for i in 0..self.names.len() {
            if !self.names[i].starts_with(prefix) {
                continue;
            }
            let src = other
                .id(&self.names[i])
                .ok_or_else(|| Error::Config(format!("source is missing tensor `{}`", self.names[i])))?;
            let t = other.value(src);
            if t.shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    name: self.names[i].clone(),
                    expected: self.values[i].shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
