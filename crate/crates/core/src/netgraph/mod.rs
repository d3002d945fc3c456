//! Net configuration and the pipeline that turns it into runnable nets:
//! undirected-edge conversion, recurrent unrolling, partitioning across
//! workers, and construction of [`NeuralNet`] instances.

mod convert;
mod net;
mod order;
mod partition;
mod unroll;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use convert::convert_undirected;
pub use net::{BuildOptions, NeuralNet, TraceEvent};
pub use order::{execution_order, OrderClass};
pub use partition::partition;
pub use unroll::unroll_recurrent;

use crate::error::{Error, Result};
use crate::layers::{LayerKind, PartInfo};
use crate::tensor::Dim;

/// Partition choice for one layer: a dimension, or explicitly unpartitioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionDim {
    None,
    Dim(Dim),
}

impl fmt::Display for PartitionDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionDim::None => f.write_str("none"),
            PartitionDim::Dim(d) => write!(f, "{d}"),
        }
    }
}

impl Serialize for PartitionDim {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PartitionDim::None => s.serialize_str("none"),
            PartitionDim::Dim(d) => s.serialize_u8(u8::from(*d)),
        }
    }
}

impl<'de> Deserialize<'de> for PartitionDim {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Dim::try_from(n)
                .map(PartitionDim::Dim)
                .map_err(serde::de::Error::custom),
            Raw::Text(t) if t == "none" => Ok(PartitionDim::None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "partition_dim must be 0, 1 or \"none\", got {t:?}"
            ))),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One layer declaration of the `net` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDecl {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub srcs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_dim: Option<PartitionDim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<usize>,
    /// Replicate this layer per unroll position (recurrent kinds always are).
    #[serde(default, skip_serializing_if = "is_false")]
    pub unroll: bool,
    /// Undirected (RBM) connections to other layers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undirected: Vec<String>,
    /// Directed back-edges produced from undirected connections; used only by
    /// the negative phase and excluded from the topological order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feedback: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_prefix: Option<String>,
    /// Unroll position of a replicated layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<PartInfo>,
}

impl LayerDecl {
    pub fn new(name: impl Into<String>, kind: LayerKind, srcs: &[&str]) -> Self {
        LayerDecl {
            name: name.into(),
            kind,
            srcs: srcs.iter().map(|s| s.to_string()).collect(),
            partition_dim: None,
            location: None,
            unroll: false,
            undirected: Vec::new(),
            feedback: Vec::new(),
            param_prefix: None,
            position: None,
            part: None,
        }
    }

    pub fn with_partition(mut self, dim: PartitionDim) -> Self {
        self.partition_dim = Some(dim);
        self
    }

    pub fn with_location(mut self, loc: usize) -> Self {
        self.location = Some(loc);
        self
    }

    pub fn unrolled(mut self) -> Self {
        self.unroll = true;
        self
    }

    pub fn with_undirected(mut self, other: &str) -> Self {
        self.undirected.push(other.to_string());
        self
    }

    pub fn param_prefix(&self) -> &str {
        self.param_prefix.as_deref().unwrap_or(&self.name)
    }
}

/// The `net` section of a job: layers and their connections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub layers: Vec<LayerDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unroll_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_partition_dim: Option<PartitionDim>,
}

impl NetConfig {
    pub fn new(layers: Vec<LayerDecl>) -> Self {
        NetConfig {
            layers,
            unroll_len: None,
            default_partition_dim: None,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDecl> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerDecl> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect()
    }

    pub fn has_recurrent(&self) -> bool {
        self.layers.iter().any(|l| l.kind.is_recurrent())
    }

    pub fn has_rbm(&self) -> bool {
        self.layers.iter().any(|l| l.kind.is_rbm())
    }

    /// Checks name uniqueness, reference resolution and the unroll length.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.name.is_empty() {
                return Err(Error::validation(format!("net.layers[{i}].name"), "empty name"));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::validation(
                    format!("net.layers[{i}].name"),
                    format!("duplicate layer name `{}`", l.name),
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (field, list) in [("srcs", &l.srcs), ("undirected", &l.undirected), ("feedback", &l.feedback)] {
                for s in list.iter() {
                    if !seen.contains(s.as_str()) {
                        return Err(Error::validation(
                            format!("net.layers[{i}].{field}"),
                            format!("unknown layer `{s}`"),
                        ));
                    }
                }
            }
        }
        let needs_unroll = self
            .layers
            .iter()
            .any(|l| l.position.is_none() && (l.kind.is_recurrent() || l.unroll));
        if needs_unroll && self.unroll_len.is_none_or(|n| n == 0) {
            return Err(Error::validation("net.unroll_len", "must be at least 1 when recurrent layers are present"));
        }
        Ok(())
    }

    /// Runs conversion, unrolling and partitioning in order.
    pub fn pipeline(&self, workers: usize) -> Result<NetConfig> {
        self.validate()?;
        let converted = convert_undirected(self)?;
        let unrolled = unroll_recurrent(&converted)?;
        partition(&unrolled, workers)
    }
}

#[cfg(test)]
mod tests;
