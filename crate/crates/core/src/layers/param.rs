use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::xavier_uniform;
use crate::tensor::Blob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Glorot uniform over the full (unpartitioned) shape.
    Xavier,
    Zeros,
}

/// Where a column block of a partitioned parameter comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamOrigin {
    pub base: String,
    pub full_shape: (usize, usize),
    pub col_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
    /// Set when this parameter is one column block of a larger one.
    pub origin: Option<ParamOrigin>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
            origin: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    /// Name of the unpartitioned parameter this one belongs to.
    pub fn base_name(&self) -> &str {
        self.origin.as_ref().map_or(&self.name, |o| &o.base)
    }

    pub fn full_shape(&self) -> (usize, usize) {
        self.origin.as_ref().map_or(self.shape, |o| o.full_shape)
    }

    /// Fresh value: the full parameter is generated from `(seed, base name)`
    /// and this spec's column block is cut out of it.
    pub fn initial_value(&self, seed: u64) -> Blob {
        let (rows, cols) = self.full_shape();
        let full = match self.init {
            Init::Xavier => xavier_uniform(seed, self.base_name(), rows, cols),
            Init::Zeros => Blob::zeros(rows, cols),
        };
        self.block_of(&full)
            .expect("full shape is consistent with the block")
    }

    /// Cuts this spec's block out of a value with the full shape.
    pub fn block_of(&self, full: &Blob) -> Result<Blob> {
        if full.shape() != self.full_shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` expects shape {:?}, found {:?}",
                self.base_name(),
                self.full_shape(),
                full.shape()
            )));
        }
        Ok(match &self.origin {
            None => full.clone(),
            Some(o) => full.cols_range(o.col_offset, self.shape.1),
        })
    }
}

/// A learnable tensor as seen by a worker: value, gradient and version.
#[derive(Debug, Clone)]
pub struct Param {
    pub spec: ParamSpec,
    value: Blob,
    grad: Blob,
    version: u64,
}

impl Param {
    pub fn new(spec: ParamSpec, value: Blob) -> Result<Self> {
        if value.shape() != spec.shape {
            return Err(Error::Dimension {
                op: "param",
                lhs: spec.shape,
                rhs: value.shape(),
            });
        }
        let grad = Blob::zeros(spec.shape.0, spec.shape.1);
        Ok(Param {
            spec,
            value,
            grad,
            version: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn value(&self) -> &Blob {
        &self.value
    }

    pub fn grad(&self) -> &Blob {
        &self.grad
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Installs a fresh value. Versions never move backwards.
    pub fn refresh(&mut self, value: Blob, version: u64) -> Result<()> {
        if value.shape() != self.spec.shape {
            return Err(Error::Dimension {
                op: "refresh",
                lhs: self.spec.shape,
                rhs: value.shape(),
            });
        }
        self.value = value;
        self.version = self.version.max(version);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Blob::zeros(self.spec.shape.0, self.spec.shape.1);
    }

    pub fn accumulate_grad(&mut self, g: &Blob) -> Result<()> {
        self.grad.add_assign(g)
    }
}

/// Parameters referenced by one net, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ParamTable {
    params: BTreeMap<String, Param>,
}

impl ParamTable {
    pub fn insert(&mut self, p: Param) {
        self.params.insert(p.name().to_string(), p);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Blob> {
        Ok(self.get(name)?.value())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn values(&self) -> BTreeMap<String, Blob> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value().clone()))
            .collect()
    }
}
