//! Communication cost of partitioning strategies and the per-layer plan
//! that minimizes it.
//!
//! Costs count elements transferred per worker per iteration. With `b` the
//! effective mini-batch size summed over all `K` workers of a group, `p` a
//! layer's parameter count and `d_v`/`d_h` its input/output feature
//! lengths:
//!
//! * data parallelism exchanges the parameters: `p`;
//! * model parallelism exchanges features: `b·d_v` when the hidden units
//!   are split, `b·d_h` when the visible units are, whichever is smaller;
//! * leaving a layer whole costs `b·(K−1)·d_v/K` to gather its input, and
//!   one worker then does the layer's compute alone.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::netgraph::{NetConfig, NeuralNet, PartitionDim};
use crate::tensor::Dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dependency {
    /// Each output element depends on one input element.
    Elementwise,
    #[default]
    Full,
}

fn yes() -> bool {
    true
}

/// Sizes of one layer. Counts are signed so that bad input can be
/// reported instead of failing to parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCostProfile {
    pub name: String,
    pub p: i64,
    pub d_v: i64,
    pub d_h: i64,
    #[serde(default)]
    pub dependency: Dependency,
    /// Layer the strategy is inherited from when elementwise; defaults to
    /// the previous profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Whether the layer can be split on its feature dimension.
    #[serde(default = "yes")]
    pub splittable: bool,
}

impl LayerCostProfile {
    pub fn new(name: &str, p: i64, d_v: i64, d_h: i64) -> Self {
        LayerCostProfile {
            name: name.to_string(),
            p,
            d_v,
            d_h,
            dependency: Dependency::Full,
            source: None,
            splittable: true,
        }
    }

    pub fn elementwise(name: &str, d: i64) -> Self {
        LayerCostProfile {
            dependency: Dependency::Elementwise,
            ..LayerCostProfile::new(name, 0, d, d)
        }
    }

    pub fn has_params(&self) -> bool {
        self.p > 0
    }

    fn validate(&self, path: &str) -> Result<()> {
        for (field, v) in [("p", self.p), ("d_v", self.d_v), ("d_h", self.d_h)] {
            if v < 0 {
                return Err(Error::validation(format!("{path}.{field}"), format!("must not be negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Data,
    Model,
    None,
}

impl Strategy {
    pub fn partition_dim(self) -> PartitionDim {
        match self {
            Strategy::Data => PartitionDim::Dim(Dim::Rows),
            Strategy::Model => PartitionDim::Dim(Dim::Cols),
            Strategy::None => PartitionDim::None,
        }
    }
}

/// Which side model parallelism splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Hidden units are split; every worker needs the whole input: `b·d_v`.
    SplitHidden,
    /// Visible units are split; partial outputs are exchanged: `b·d_h`.
    SplitVisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub elements: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<ModelVariant>,
}

fn check_bk(b: i64, k: i64) -> Result<(u64, u64)> {
    if b < 1 {
        return Err(Error::validation("b", format!("must be at least 1, got {b}")));
    }
    if k < 1 {
        return Err(Error::validation("k", format!("must be at least 1, got {k}")));
    }
    Ok((b as u64, k as u64))
}

fn mul(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b).ok_or_else(|| Error::validation("b", "cost overflows 64 bits"))
}

/// Elements one worker transfers per iteration for `profile` under
/// `strategy`. A single worker transfers nothing.
pub fn layer_cost(profile: &LayerCostProfile, strategy: Strategy, b: i64, k: i64) -> Result<LayerCost> {
    profile.validate("profile")?;
    let (b, k) = check_bk(b, k)?;
    let (p, dv, dh) = (profile.p as u64, profile.d_v as u64, profile.d_h as u64);
    if k == 1 {
        return Ok(LayerCost {
            elements: 0,
            variant: (strategy == Strategy::Model).then_some(ModelVariant::SplitHidden),
        });
    }
    Ok(match strategy {
        Strategy::Data => LayerCost {
            elements: p,
            variant: None,
        },
        Strategy::Model => {
            let (hidden, visible) = (mul(b, dv)?, mul(b, dh)?);
            if hidden <= visible {
                LayerCost {
                    elements: hidden,
                    variant: Some(ModelVariant::SplitHidden),
                }
            } else {
                LayerCost {
                    elements: visible,
                    variant: Some(ModelVariant::SplitVisible),
                }
            }
        }
        Strategy::None => LayerCost {
            elements: mul(mul(b, k - 1)?, dv)? / k,
            variant: None,
        },
    })
}

/// One layer of a recommended plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedLayer {
    pub name: String,
    pub strategy: Strategy,
    /// Cost under the chosen strategy; 0 for inherited strategies.
    pub cost: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<ModelVariant>,
    pub inherited: bool,
    pub data_cost: u64,
    /// Absent when the layer cannot be split on features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_cost: Option<u64>,
    /// Cost of keeping the layer whole. Never chosen: it also leaves one
    /// worker doing `compute_factor` times its share of the compute.
    pub none_cost: u64,
    pub compute_factor: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub b: u64,
    pub k: u64,
    pub layers: Vec<PlannedLayer>,
    pub total_cost_per_worker: u64,
}

impl PartitionPlan {
    pub fn strategy(&self, layer: &str) -> Option<Strategy> {
        self.layers.iter().find(|l| l.name == layer).map(|l| l.strategy)
    }

    /// Job-config fragment setting each layer's `partition_dim`.
    pub fn fragment(&self) -> PlanFragment {
        PlanFragment {
            net: FragmentNet {
                layers: self
                    .layers
                    .iter()
                    .map(|l| FragmentLayer {
                        name: l.name.clone(),
                        partition_dim: l.strategy.partition_dim(),
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentLayer {
    pub name: String,
    pub partition_dim: PartitionDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentNet {
    pub layers: Vec<FragmentLayer>,
}

/// The part of a job config a plan sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFragment {
    pub net: FragmentNet,
}

impl PlanFragment {
    /// Writes the partition dims into `net`. Every named layer must exist.
    pub fn apply(&self, net: &mut NetConfig) -> Result<()> {
        for (i, l) in self.net.layers.iter().enumerate() {
            let decl = net.layer_mut(&l.name).ok_or_else(|| {
                Error::validation(format!("plan.net.layers[{i}].name"), format!("no layer named `{}`", l.name))
            })?;
            decl.partition_dim = Some(l.partition_dim);
        }
        Ok(())
    }
}

/// Picks a strategy per layer minimizing the summed cost. Elementwise
/// layers follow their source at no cost; ties go to data parallelism.
/// With one worker every layer stays whole.
///
/// The objective is a sum of independent per-layer terms once inherited
/// layers are fixed, so the per-layer minimum is the exhaustive optimum.
pub fn recommend_plan(profiles: &[LayerCostProfile], b: i64, k: i64) -> Result<PartitionPlan> {
    if profiles.is_empty() {
        return Err(Error::validation("profiles", "needs at least one layer"));
    }
    let (bu, ku) = check_bk(b, k)?;
    let mut chosen: HashMap<&str, Strategy> = HashMap::new();
    let mut layers = Vec::with_capacity(profiles.len());
    for (i, prof) in profiles.iter().enumerate() {
        prof.validate(&format!("profiles[{i}]"))?;
        let data = layer_cost(prof, Strategy::Data, b, k)?;
        let model = if prof.splittable {
            Some(layer_cost(prof, Strategy::Model, b, k)?)
        } else {
            None
        };
        let none = layer_cost(prof, Strategy::None, b, k)?;
        let inherited_from = match prof.dependency {
            Dependency::Elementwise => match &prof.source {
                Some(s) => Some(chosen.get(s.as_str()).copied().ok_or_else(|| {
                    Error::validation(format!("profiles[{i}].source"), format!("`{s}` is not an earlier layer"))
                })?),
                None if i > 0 => Some(chosen[profiles[i - 1].name.as_str()]),
                None => None,
            },
            Dependency::Full => None,
        };
        let (strategy, cost, variant, inherited) = if ku == 1 {
            (Strategy::None, 0, None, false)
        } else if let Some(s) = inherited_from {
            let s = if s == Strategy::Model && !prof.splittable { Strategy::Data } else { s };
            (s, 0, None, true)
        } else {
            match model {
                Some(m) if m.elements < data.elements => (Strategy::Model, m.elements, m.variant, false),
                _ => (Strategy::Data, data.elements, None, false),
            }
        };
        chosen.insert(&prof.name, strategy);
        layers.push(PlannedLayer {
            name: prof.name.clone(),
            strategy,
            cost,
            variant,
            inherited,
            data_cost: data.elements,
            model_cost: model.map(|m| m.elements),
            none_cost: none.elements,
            compute_factor: ku,
        });
    }
    let total = layers.iter().map(|l| l.cost).sum();
    Ok(PartitionPlan {
        b: bu,
        k: ku,
        layers,
        total_cost_per_worker: total,
    })
}

fn base_name(name: &str) -> &str {
    name.split_once('#').map_or(name, |(base, _)| base)
}

/// Profiles of the layers of `cfg`, in execution order, measured on the
/// net built whole for batch `b`. Unrolled copies are profiled once under
/// their declared name.
pub fn profiles_from_net(cfg: &NetConfig, b: usize, k: usize) -> Result<Vec<LayerCostProfile>> {
    let whole = NeuralNet::build(&cfg.pipeline(1)?, crate::netgraph::BuildOptions { batch: b.max(1), seed: 0 })?;
    let mut out: Vec<LayerCostProfile> = Vec::new();
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for (pos, layer) in whole.layers().iter().enumerate() {
        let name = base_name(&layer.name);
        if seen.insert(name.to_string(), ()).is_some() {
            continue;
        }
        let srcs = whole.sources(pos);
        let d_v: usize = srcs.iter().map(|&s| whole.layers()[s].shape.1).sum();
        let p: usize = whole.owned_params(pos).iter().filter_map(|n| whole.params().value(n).ok()).map(|v| v.len()).sum();
        let splittable = layer.kind.splittable_on_features()
            && !matches!(layer.kind, LayerKind::InnerProduct { out } if out < k);
        let elementwise = layer.kind.is_elementwise() && srcs.len() == 1;
        out.push(LayerCostProfile {
            name: name.to_string(),
            p: p as i64,
            d_v: d_v as i64,
            d_h: layer.shape.1 as i64,
            dependency: if elementwise { Dependency::Elementwise } else { Dependency::Full },
            source: elementwise.then(|| base_name(&whole.layers()[srcs[0]].name).to_string()),
            splittable,
        });
    }
    Ok(out)
}
