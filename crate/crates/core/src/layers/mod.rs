//! Layer and parameter abstraction plus the built-in layer catalog.
//!
//! A [`Layer`] transforms the data blobs of its source layers into its own
//! data blob (`compute_feature`) and turns the gradient of its own data into
//! gradients for its sources and parameters (`compute_gradient`). Layers
//! never own parameter values; they reference entries of a [`ParamTable`] by
//! name so that replicas, unrolled instances and RBM halves can share them.

mod compute;
mod param;

use serde::{Deserialize, Serialize};

pub use compute::reconstruction_cross_entropy;
pub use param::{Init, Param, ParamOrigin, ParamSpec, ParamTable};

use crate::error::{Error, Result};
use crate::rng::UniformSource;
use crate::tensor::{split_range, Blob, Dim};

/// Built-in layer kinds and their settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    /// Emits the feature rows of the current mini-batch.
    Input { dim: usize },
    /// Emits labels: the batch labels when sourceless, else one column of the source.
    Label {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        column: Option<usize>,
    },
    /// Maps the integer symbol in `column` of the source to an indicator vector.
    OneHot {
        vocab: usize,
        #[serde(default)]
        column: usize,
    },
    InnerProduct { out: usize },
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxLoss,
    EuclideanLoss,
    RbmVis,
    RbmHid { hidden: usize },
    Recurrent { hidden: usize },
    BridgeSrc { id: u32 },
    BridgeDst { id: u32 },
    Slice { dim: Dim, parts: usize, index: usize },
    Concat { dim: Dim },
    Split,
}

impl LayerKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Label { .. } => "label",
            LayerKind::OneHot { .. } => "one_hot",
            LayerKind::InnerProduct { .. } => "inner_product",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Tanh => "tanh",
            LayerKind::Relu => "relu",
            LayerKind::SoftmaxLoss => "softmax_loss",
            LayerKind::EuclideanLoss => "euclidean_loss",
            LayerKind::RbmVis => "rbm_vis",
            LayerKind::RbmHid { .. } => "rbm_hid",
            LayerKind::Recurrent { .. } => "recurrent",
            LayerKind::BridgeSrc { .. } => "bridge_src",
            LayerKind::BridgeDst { .. } => "bridge_dst",
            LayerKind::Slice { .. } => "slice",
            LayerKind::Concat { .. } => "concat",
            LayerKind::Split => "split",
        }
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, LayerKind::SoftmaxLoss | LayerKind::EuclideanLoss)
    }

    pub fn is_rbm(&self) -> bool {
        matches!(self, LayerKind::RbmVis | LayerKind::RbmHid { .. })
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, LayerKind::Recurrent { .. })
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, LayerKind::Sigmoid | LayerKind::Tanh | LayerKind::Relu)
    }

    pub fn is_connection(&self) -> bool {
        matches!(
            self,
            LayerKind::BridgeSrc { .. }
                | LayerKind::BridgeDst { .. }
                | LayerKind::Slice { .. }
                | LayerKind::Concat { .. }
                | LayerKind::Split
        )
    }

    /// Kinds that read the current mini-batch or derive fixed targets from it.
    pub fn is_data_source(&self) -> bool {
        matches!(
            self,
            LayerKind::Input { .. } | LayerKind::Label { .. } | LayerKind::OneHot { .. }
        )
    }

    /// Whether `compute_gradient` needs the gradient of this layer's own data.
    pub fn consumes_grad(&self) -> bool {
        !(self.is_loss() || self.is_rbm() || self.is_data_source())
            && !matches!(self, LayerKind::BridgeSrc { .. })
    }

    /// Whether gradients flow from this layer back into its sources.
    pub fn propagates_grad(&self) -> bool {
        !(self.is_rbm() || self.is_data_source())
    }

    /// Whether the kind may be split on the feature dimension.
    pub fn splittable_on_features(&self) -> bool {
        matches!(self, LayerKind::InnerProduct { .. }) || self.is_elementwise()
    }
}

/// Identifies one piece of a partitioned layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartInfo {
    pub base: String,
    pub dim: Dim,
    pub index: usize,
    pub parts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Direction of a bridge transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flow {
    Forward,
    Backward,
}

/// One mini-batch: `rows×d` features and `rows×1` labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Blob,
    pub labels: Blob,
}

/// Services a layer may need from its execution unit.
pub trait LayerEnv {
    /// Hands a blob to the paired bridge endpoint and returns immediately.
    fn bridge_send(&mut self, id: u32, flow: Flow, blob: Blob) -> Result<()>;
    /// Blocks until the paired endpoint's blob arrives.
    fn bridge_recv(&mut self, id: u32, flow: Flow) -> Result<Blob>;
    fn rng(&mut self) -> &mut dyn UniformSource;
}

/// Running loss and accuracy totals of a loss-reporting layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    /// Sum of per-example losses (not normalized).
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
    pub has_accuracy: bool,
}

impl LossStats {
    pub fn merge(&mut self, other: &LossStats) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.count += other.count;
        self.has_accuracy |= other.has_accuracy;
    }
}

/// Static description of a layer, resolved before setup.
#[derive(Debug, Clone)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    pub location: usize,
    pub part: Option<PartInfo>,
    /// Prefix of the parameter names this layer owns.
    pub param_prefix: String,
}

/// Inputs for shape inference.
#[derive(Debug, Clone, Copy)]
pub struct SetupCtx<'a> {
    /// Effective mini-batch size, summed over every piece of the batch.
    pub batch: usize,
    pub src_shapes: &'a [(usize, usize)],
    /// For an RBM visible layer: parameter prefix and width of its hidden partner.
    pub rbm_partner: Option<(&'a str, usize)>,
}

#[derive(Debug, Clone, Default)]
enum Cache {
    #[default]
    Empty,
    Softmax {
        probs: Blob,
        labels: Vec<usize>,
    },
    Euclid {
        diff: Blob,
    },
    RbmVis {
        recon: Option<Blob>,
    },
    RbmHid {
        sample: Blob,
        neg_prob: Option<Blob>,
        neg_vis: Option<Blob>,
    },
    Concat {
        sizes: Vec<usize>,
    },
}

/// A layer instance owned by one execution unit.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub location: usize,
    pub part: Option<PartInfo>,
    /// Names of the parameters this layer reads, in kind-specific order.
    pub params: Vec<String>,
    /// Shape inferred at setup for the effective batch.
    pub shape: (usize, usize),
    /// Loss and RBM gradients are divided by this (the effective batch size).
    norm: f64,
    cache: Cache,
    stats: Option<LossStats>,
}

fn arity(def: &LayerDef, got: usize, want: std::ops::RangeInclusive<usize>) -> Result<()> {
    if want.contains(&got) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "layer `{}` ({}) takes {:?} sources, got {got}",
            def.name,
            def.kind.type_name(),
            want
        )))
    }
}

fn bad_shape(def: &LayerDef, why: impl std::fmt::Display) -> Error {
    Error::config(format!("layer `{}` ({}): {why}", def.name, def.kind.type_name()))
}

impl Layer {
    /// Infers the output shape and the parameters of a layer.
    pub fn setup(def: &LayerDef, ctx: SetupCtx<'_>) -> Result<(Layer, Vec<ParamSpec>)> {
        let srcs = ctx.src_shapes;
        let mut specs = Vec::new();
        let local_rows = match &def.part {
            Some(p) if p.dim == Dim::Rows => split_range(ctx.batch, p.parts, p.index)?.1,
            _ => ctx.batch,
        };
        // Column block of a feature-partitioned layer, if any.
        let col_block = |n: usize| -> Result<Option<(usize, usize)>> {
            match &def.part {
                Some(p) if p.dim == Dim::Cols => Ok(Some(split_range(n, p.parts, p.index)?)),
                _ => Ok(None),
            }
        };
        let prefix = &def.param_prefix;
        let shape = match &def.kind {
            LayerKind::Input { dim } => {
                arity(def, srcs.len(), 0..=0)?;
                if col_block(*dim)?.is_some() {
                    return Err(bad_shape(def, "input layers cannot be split on dimension 1"));
                }
                (local_rows, *dim)
            }
            LayerKind::Label { column } => match column {
                None => {
                    arity(def, srcs.len(), 0..=0)?;
                    (local_rows, 1)
                }
                Some(c) => {
                    arity(def, srcs.len(), 1..=1)?;
                    if *c >= srcs[0].1 {
                        return Err(bad_shape(def, format!("column {c} out of {} columns", srcs[0].1)));
                    }
                    (srcs[0].0, 1)
                }
            },
            LayerKind::OneHot { vocab, column } => {
                arity(def, srcs.len(), 1..=1)?;
                if *column >= srcs[0].1 {
                    return Err(bad_shape(def, format!("column {column} out of {} columns", srcs[0].1)));
                }
                (srcs[0].0, *vocab)
            }
            LayerKind::InnerProduct { out } => {
                arity(def, srcs.len(), 1..=1)?;
                let d_in = srcs[0].1;
                let w = format!("{prefix}/W");
                let b = format!("{prefix}/b");
                match col_block(*out)? {
                    None => {
                        specs.push(ParamSpec::new(w, (d_in, *out), Init::Xavier));
                        specs.push(ParamSpec::new(b, (1, *out), Init::Zeros));
                        (srcs[0].0, *out)
                    }
                    Some((offset, width)) => {
                        let index = def.part.as_ref().map_or(0, |p| p.index);
                        specs.push(ParamSpec {
                            name: format!("{prefix}@{index}/W"),
                            shape: (d_in, width),
                            init: Init::Xavier,
                            origin: Some(ParamOrigin {
                                base: w,
                                full_shape: (d_in, *out),
                                col_offset: offset,
                            }),
                        });
                        specs.push(ParamSpec {
                            name: format!("{prefix}@{index}/b"),
                            shape: (1, width),
                            init: Init::Zeros,
                            origin: Some(ParamOrigin {
                                base: b,
                                full_shape: (1, *out),
                                col_offset: offset,
                            }),
                        });
                        (srcs[0].0, width)
                    }
                }
            }
            LayerKind::Sigmoid | LayerKind::Tanh | LayerKind::Relu => {
                arity(def, srcs.len(), 1..=1)?;
                srcs[0]
            }
            LayerKind::SoftmaxLoss => {
                arity(def, srcs.len(), 2..=2)?;
                if srcs[1].1 != 1 || srcs[0].0 != srcs[1].0 {
                    return Err(bad_shape(
                        def,
                        format!("scores {:?} and labels {:?} disagree", srcs[0], srcs[1]),
                    ));
                }
                (1, 1)
            }
            LayerKind::EuclideanLoss => {
                arity(def, srcs.len(), 2..=2)?;
                if srcs[0] != srcs[1] {
                    return Err(bad_shape(def, format!("{:?} vs {:?}", srcs[0], srcs[1])));
                }
                (1, 1)
            }
            LayerKind::RbmVis => {
                arity(def, srcs.len(), 1..=1)?;
                let (partner, hidden) = ctx
                    .rbm_partner
                    .ok_or_else(|| bad_shape(def, "visible layer has no hidden partner"))?;
                specs.push(ParamSpec::new(format!("{partner}/W"), (srcs[0].1, hidden), Init::Xavier));
                specs.push(ParamSpec::new(format!("{prefix}/b"), (1, srcs[0].1), Init::Zeros));
                srcs[0]
            }
            LayerKind::RbmHid { hidden } => {
                arity(def, srcs.len(), 1..=1)?;
                specs.push(ParamSpec::new(format!("{prefix}/W"), (srcs[0].1, *hidden), Init::Xavier));
                specs.push(ParamSpec::new(format!("{prefix}/b"), (1, *hidden), Init::Zeros));
                (srcs[0].0, *hidden)
            }
            LayerKind::Recurrent { hidden } => {
                arity(def, srcs.len(), 1..=2)?;
                if srcs.len() == 2 && srcs[1] != (srcs[0].0, *hidden) {
                    return Err(bad_shape(def, format!("hidden state shape {:?}", srcs[1])));
                }
                specs.push(ParamSpec::new(format!("{prefix}/Wx"), (srcs[0].1, *hidden), Init::Xavier));
                specs.push(ParamSpec::new(format!("{prefix}/Wh"), (*hidden, *hidden), Init::Xavier));
                specs.push(ParamSpec::new(format!("{prefix}/b"), (1, *hidden), Init::Zeros));
                (srcs[0].0, *hidden)
            }
            LayerKind::BridgeSrc { .. } | LayerKind::BridgeDst { .. } | LayerKind::Split => {
                arity(def, srcs.len(), 1..=1)?;
                srcs[0]
            }
            LayerKind::Slice { dim, parts, index } => {
                arity(def, srcs.len(), 1..=1)?;
                match dim {
                    Dim::Rows => (split_range(srcs[0].0, *parts, *index)?.1, srcs[0].1),
                    Dim::Cols => (srcs[0].0, split_range(srcs[0].1, *parts, *index)?.1),
                }
            }
            LayerKind::Concat { dim } => {
                arity(def, srcs.len(), 1..=usize::MAX)?;
                let first = srcs[0];
                let mut shape = first;
                for s in &srcs[1..] {
                    match dim {
                        Dim::Rows if s.1 == first.1 => shape.0 += s.0,
                        Dim::Cols if s.0 == first.0 => shape.1 += s.1,
                        _ => return Err(bad_shape(def, format!("cannot concatenate {first:?} and {s:?}"))),
                    }
                }
                shape
            }
        };
        if def.kind.is_loss() {
            if let Some(p) = &def.part {
                if p.dim == Dim::Cols {
                    return Err(bad_shape(def, "loss layers need full rows and cannot be split on dimension 1"));
                }
            }
        }
        let stats = (def.kind.is_loss() || matches!(def.kind, LayerKind::RbmVis)).then(LossStats::default);
        let layer = Layer {
            name: def.name.clone(),
            kind: def.kind.clone(),
            location: def.location,
            part: def.part.clone(),
            params: specs.iter().map(|s| s.name.clone()).collect(),
            shape,
            norm: ctx.batch.max(1) as f64,
            cache: Cache::Empty,
            stats,
        };
        Ok((layer, specs))
    }

    /// Loss totals of the last forward pass, for loss layers and RBM visible layers.
    pub fn stats(&self) -> Option<&LossStats> {
        self.stats.as_ref()
    }

    /// Overrides the gradient normalizer; used when a net is reused for a
    /// batch of a different size.
    pub fn set_norm(&mut self, norm: usize) {
        self.norm = norm.max(1) as f64;
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn compute_feature(
        &mut self,
        phase: Phase,
        srcs: &[&Blob],
        params: &ParamTable,
        batch: Option<&Batch>,
        env: &mut dyn LayerEnv,
    ) -> Result<Blob> {
        compute::forward(self, phase, srcs, params, batch, env)
    }

    /// Returns one optional gradient per source; `wants[i]` says whether
    /// source `i` needs one.
    pub fn compute_gradient(
        &mut self,
        srcs: &[&Blob],
        data: &Blob,
        grad: Option<&Blob>,
        wants: &[bool],
        params: &mut ParamTable,
        env: &mut dyn LayerEnv,
    ) -> Result<Vec<Option<Blob>>> {
        compute::backward(self, srcs, data, grad, wants, params, env)
    }

    /// Hidden sample drawn by the last positive or negative phase of an RBM hidden layer.
    pub fn rbm_hidden_sample(&self) -> Result<&Blob> {
        match &self.cache {
            Cache::RbmHid { sample, .. } => Ok(sample),
            _ => Err(Error::sequencing(&self.name, "no hidden sample; positive phase has not run")),
        }
    }

    /// Current reconstruction held by an RBM visible layer.
    pub fn rbm_reconstruction(&self) -> Result<&Blob> {
        match &self.cache {
            Cache::RbmVis { recon: Some(r) } => Ok(r),
            _ => Err(Error::sequencing(&self.name, "no reconstruction; negative phase has not run")),
        }
    }

    /// Negative phase on the visible side: `p(v|h) = sigmoid(h Wᵀ + a)`.
    pub fn rbm_reconstruct(&mut self, visible: &Blob, hidden_sample: &Blob, params: &ParamTable) -> Result<()> {
        compute::rbm_reconstruct(self, visible, hidden_sample, params)
    }

    /// Negative phase on the hidden side. The chain's last step keeps
    /// probabilities only; earlier steps also draw a new sample.
    pub fn rbm_negative(
        &mut self,
        recon: &Blob,
        params: &ParamTable,
        last_step: bool,
        env: &mut dyn LayerEnv,
    ) -> Result<()> {
        compute::rbm_negative(self, recon, params, last_step, env)
    }
}

#[cfg(test)]
mod tests;
