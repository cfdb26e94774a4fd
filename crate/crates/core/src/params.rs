//! Named parameter storage with per-entry trainable flags.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S: Real> {
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

/// Parameter path → tensor, ordered by path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Real = f32> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }
}

/// Parameter path → tape variable, produced by [`ParamStore::bind`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }
}

pub type GradMap<S> = BTreeMap<String, Tensor<S>>;

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        self.entries.insert(path, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(path)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(path)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn entry(&self, path: &str) -> Option<&ParamEntry<S>> {
        self.entries.get(path)
    }

    pub fn is_trainable(&self, path: &str) -> Option<bool> {
        self.entries.get(path).map(|e| e.trainable)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values across trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Copy of the trainable entries only.
    pub fn trainable_subset(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| e.trainable)
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every entry on `tape`: trainable entries as gradient
    /// leaves, frozen entries as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let v = if e.trainable {
                    tape.param(&e.tensor)
                } else {
                    tape.constant(&e.tensor)
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Collects gradients of trainable entries reachable from the loss.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<S>) -> GradMap<S> {
        let mut out = BTreeMap::new();
        for (path, e) in &self.entries {
            if !e.trainable {
                continue;
            }
            if let Some(&v) = bound.vars.get(path) {
                if let Some(g) = grads.take(v) {
                    out.insert(path.clone(), g);
                }
            }
        }
        out
    }

    /// Overwrites values of existing entries from `other` (shapes must agree).
    pub fn load_values(&mut self, other: &ParamStore<S>) -> Result<()> {
        for (path, e) in &other.entries {
            let dst = self.get_mut(path)?;
            if dst.shape() != e.tensor.shape() {
                return Err(Error::shape("load_values", dst.shape(), e.tensor.shape()));
            }
            *dst = e.tensor.clone();
        }
        Ok(())
    }
}
