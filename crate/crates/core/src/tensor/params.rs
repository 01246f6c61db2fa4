use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Named trainable tensors with their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics if `name` is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.entries.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
        self.entries.push(Entry {
            name,
            value,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    pub(crate) fn grad_and_value_mut(&mut self, id: ParamId) -> (Option<&[f64]>, &mut Tensor) {
        let e = &mut self.entries[id.0];
        (e.grad.as_deref(), &mut e.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            let entry = &mut self.entries[id.0];
            match &mut entry.grad {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
                None => entry.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.entries.iter().any(|e| e.grad.is_some())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    values: e.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites every parameter from `ckpt`; names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                ckpt.params.len()
            )));
        }
        for p in &ckpt.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", p.name)))?;
            let entry = &mut self.entries[id.0];
            if entry.value.shape() != p.shape.as_slice() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    left: entry.value.shape().to_vec(),
                    right: p.shape.clone(),
                });
            }
            entry.value = Tensor::new(p.shape.clone(), p.values.clone())?;
            entry.grad = None;
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "exsum-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned JSON tree of named parameter tensors plus free-form metadata
/// (model configuration, run fingerprint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(input: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(input)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        for p in &ckpt.params {
            let n = p
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{}: shape overflows", p.name)))?;
            if n != p.values.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match {} values",
                    p.name,
                    p.shape,
                    p.values.len()
                )));
            }
        }
        Ok(ckpt)
    }

    /// Guards model construction from an untrusted config: every `rows ×
    /// cols` matrix the config implies must fit in the stored values, and
    /// the config may not imply more tensors than are stored.
    pub fn ensure_fits(&self, matrices: &[(usize, usize)], tensors: usize) -> Result<()> {
        let stored: usize = self.params.iter().map(|p| p.values.len()).sum();
        for &(r, c) in matrices {
            if r.checked_mul(c).map_or(true, |n| n > stored) {
                return Err(Error::Checkpoint(format!(
                    "config implies a {r}x{c} tensor but only {stored} values are stored"
                )));
            }
        }
        if tensors > self.params.len() {
            return Err(Error::Checkpoint(format!(
                "config implies at least {tensors} tensors, found {}",
                self.params.len()
            )));
        }
        Ok(())
    }
}
