//! Named tensor collections and their binding to a tape.

use std::collections::BTreeMap;

use loda_tensor::{Gradients, Rng, Tape, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered map from parameter name to tensor. Iteration order is the
/// lexicographic name order, which keeps hashing and file layout stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Param {
            name: name.to_string(),
            msg: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Param {
            name: name.to_string(),
            msg: "missing".into(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for t in self.tensors.values_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Move every tensor of `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, t) in other.tensors {
            if self.tensors.contains_key(&name) {
                return Err(Error::Param { name, msg: "defined twice".into() });
            }
            self.tensors.insert(name, t);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the data.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Put every tensor on `tape` as a leaf. Tensor payloads are shared, not
    /// copied.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect(),
        }
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::Param {
                    name: name.clone(),
                    msg: format!("shape {:?} does not match expected {:?}", o.shape(), t.shape()),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::Param { name: extra.to_string(), msg: "unexpected tensor".into() });
        }
        Ok(())
    }
}

/// Parameters bound to one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| Error::Param {
            name: name.to_string(),
            msg: "missing".into(),
        })
    }

    /// Merge another binding (same tape) into this one.
    pub fn merge(&mut self, other: Bound<'t>) {
        self.vars.extend(other.vars);
    }

    /// Gradients of every bound tensor that received one, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Tensor initializers used across the model.
pub(crate) fn lecun(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    Ok(Tensor::normal(shape, 0.0, 1.0 / (fan_in as f64).sqrt(), rng)?)
}

pub(crate) fn he(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    Ok(Tensor::normal(shape, 0.0, (2.0 / fan_in as f64).sqrt(), rng)?)
}

pub(crate) fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape)?)
}

pub(crate) fn ones(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::ones(shape)?)
}

/// Insert `{prefix}.weight` `(in, out)` and `{prefix}.bias` for an affine map.
pub(crate) fn linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    store.insert(format!("{prefix}.weight"), lecun(&[fan_in, fan_out], fan_in, rng)?);
    store.insert(format!("{prefix}.bias"), zeros(&[fan_out])?);
    Ok(())
}
