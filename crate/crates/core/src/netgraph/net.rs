use std::collections::{BTreeMap, HashMap};

use super::order::{execution_order, OrderClass};
use super::NetConfig;
use crate::error::{Error, Result};
use crate::layers::{Batch, Layer, LayerDef, LayerEnv, LayerKind, LossStats, Param, ParamSpec, ParamTable, Phase, SetupCtx};
use crate::tensor::{concat, Blob, Dim};

/// Settings that shape a built net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Effective mini-batch size: rows per iteration summed over all pieces.
    pub batch: usize,
    /// Job seed; parameters are initialized from it by name.
    pub seed: u64,
}

/// One step of a training pass, recorded when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Collect { layer: String, param: String },
    Forward { layer: String },
    Backward { layer: String },
    Update { layer: String, param: String },
}

/// A set of connected layer instances, stored in execution order.
///
/// A net is either the whole (possibly partitioned) graph or the fragment
/// of one location. Layer outputs and incoming gradients live here; the
/// layers themselves only keep what their backward pass needs.
#[derive(Debug, Clone)]
pub struct NeuralNet {
    layers: Vec<Layer>,
    srcs: Vec<Vec<usize>>,
    feedback: Vec<Option<usize>>,
    needs_backward: Vec<bool>,
    wants: Vec<Vec<bool>>,
    owned: Vec<Vec<String>>,
    params: ParamTable,
    specs: BTreeMap<String, ParamSpec>,
    outputs: Vec<Option<Blob>>,
    grad_in: Vec<Vec<(String, Blob)>>,
    batch: Option<Batch>,
    location: Option<usize>,
    partition_count: usize,
    trace: Option<Vec<TraceEvent>>,
}

fn class_of(kind: &LayerKind) -> OrderClass {
    match kind {
        LayerKind::BridgeSrc { .. } => OrderClass::Send,
        LayerKind::BridgeDst { .. } => OrderClass::Receive,
        _ => OrderClass::Compute,
    }
}

impl NeuralNet {
    /// Sets up every layer of an already converted, unrolled and partitioned
    /// config, checking acyclicity and bridge pairing.
    pub fn build(cfg: &NetConfig, opts: BuildOptions) -> Result<NeuralNet> {
        cfg.validate()?;
        if let Some(l) = cfg.layers.iter().find(|l| !l.undirected.is_empty()) {
            return Err(Error::config(format!(
                "layer `{}` still has undirected edges; convert them before building",
                l.name
            )));
        }
        if opts.batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let index = cfg.index();
        let decl_srcs: Vec<Vec<usize>> = cfg
            .layers
            .iter()
            .map(|l| l.srcs.iter().map(|s| index[s.as_str()]).collect())
            .collect();
        let classes: Vec<OrderClass> = cfg.layers.iter().map(|l| class_of(&l.kind)).collect();
        let order = execution_order(&classes, &decl_srcs).map_err(|cycle| {
            let mut names: Vec<&str> = cycle.iter().map(|&i| cfg.layers[i].name.as_str()).collect();
            names.push(names[0]);
            Error::config(format!("cycle detected: {}", names.join(" -> ")))
        })?;
        let mut pos = vec![0; order.len()];
        for (p, &d) in order.iter().enumerate() {
            pos[d] = p;
        }

        let mut layers: Vec<Layer> = Vec::with_capacity(order.len());
        let mut specs: BTreeMap<String, ParamSpec> = BTreeMap::new();
        for &d in &order {
            let decl = &cfg.layers[d];
            let src_shapes: Vec<(usize, usize)> = decl_srcs[d].iter().map(|&s| layers[pos[s]].shape).collect();
            let partner = match (&decl.kind, decl.feedback.first()) {
                (LayerKind::RbmVis, Some(f)) => {
                    let h = &cfg.layers[index[f.as_str()]];
                    match h.kind {
                        LayerKind::RbmHid { hidden } => Some((h.param_prefix(), hidden)),
                        _ => {
                            return Err(Error::config(format!(
                                "visible layer `{}` is paired with `{f}`, which is not an rbm_hid layer",
                                decl.name
                            )))
                        }
                    }
                }
                _ => None,
            };
            let def = LayerDef {
                name: decl.name.clone(),
                kind: decl.kind.clone(),
                location: decl.location.unwrap_or(0),
                part: decl.part.clone(),
                param_prefix: decl.param_prefix().to_string(),
            };
            let ctx = SetupCtx {
                batch: opts.batch,
                src_shapes: &src_shapes,
                rbm_partner: partner,
            };
            let (layer, layer_specs) = Layer::setup(&def, ctx)?;
            for spec in layer_specs {
                match specs.get(&spec.name) {
                    Some(old) if old.shape != spec.shape || old.origin != spec.origin => {
                        return Err(Error::config(format!(
                            "parameter `{}` is shared with conflicting shapes {:?} and {:?}",
                            spec.name, old.shape, spec.shape
                        )))
                    }
                    Some(_) => {}
                    None => {
                        specs.insert(spec.name.clone(), spec);
                    }
                }
            }
            layers.push(layer);
        }

        let mut pairs: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (p, l) in layers.iter().enumerate() {
            match l.kind {
                LayerKind::BridgeSrc { id } => pairs.entry(id).or_default().0.push(p),
                LayerKind::BridgeDst { id } => pairs.entry(id).or_default().1.push(p),
                _ => {}
            }
        }
        let srcs: Vec<Vec<usize>> = order.iter().map(|&d| decl_srcs[d].iter().map(|&s| pos[s]).collect()).collect();
        for (id, (s, d)) in &pairs {
            if s.len() != 1 || d.len() != 1 {
                return Err(Error::config(format!(
                    "bridge {id} has {} senders and {} receivers; expected one of each",
                    s.len(),
                    d.len()
                )));
            }
            if srcs[d[0]] != [s[0]] {
                return Err(Error::config(format!(
                    "bridge receiver `{}` must read from its sender `{}`",
                    layers[d[0]].name, layers[s[0]].name
                )));
            }
        }

        let feedback = order
            .iter()
            .map(|&d| cfg.layers[d].feedback.first().map(|f| pos[index[f.as_str()]]))
            .collect();
        let mut needs_backward = vec![false; layers.len()];
        for p in 0..layers.len() {
            needs_backward[p] = !layers[p].params.is_empty()
                || (layers[p].kind.propagates_grad() && srcs[p].iter().any(|&s| needs_backward[s]));
        }
        let partition_count = layers
            .iter()
            .filter_map(|l| l.part.as_ref().map(|p| p.parts))
            .chain(layers.iter().map(|l| l.location + 1))
            .max()
            .unwrap_or(1);
        let mut params = ParamTable::default();
        for spec in specs.values() {
            params.insert(Param::new(spec.clone(), spec.initial_value(opts.seed))?);
        }
        let n = layers.len();
        let mut net = NeuralNet {
            layers,
            srcs,
            feedback,
            needs_backward,
            wants: Vec::new(),
            owned: Vec::new(),
            params,
            specs,
            outputs: vec![None; n],
            grad_in: vec![Vec::new(); n],
            batch: None,
            location: None,
            partition_count,
            trace: None,
        };
        net.finish();
        Ok(net)
    }

    /// Builds the whole net and keeps only the layers placed at `location`.
    pub fn build_fragment(cfg: &NetConfig, opts: BuildOptions, location: usize) -> Result<NeuralNet> {
        NeuralNet::build(cfg, opts)?.fragment(location)
    }

    /// Recomputes gradient routing and parameter ownership.
    fn finish(&mut self) {
        self.wants = self
            .srcs
            .iter()
            .enumerate()
            .map(|(p, list)| {
                list.iter()
                    .map(|&s| self.layers[p].kind.propagates_grad() && self.needs_backward[s])
                    .collect()
            })
            .collect();
        let mut seen = std::collections::HashSet::new();
        self.owned = self
            .layers
            .iter()
            .map(|l| l.params.iter().filter(|p| seen.insert(p.as_str().to_owned())).cloned().collect())
            .collect();
    }

    /// The layers placed at `location`, wired as a standalone net. Bridge
    /// receivers lose their remote source; every other edge must be local.
    pub fn fragment(&self, location: usize) -> Result<NeuralNet> {
        let keep: Vec<usize> = (0..self.layers.len()).filter(|&p| self.layers[p].location == location).collect();
        let mut new_pos = HashMap::new();
        for (q, &p) in keep.iter().enumerate() {
            new_pos.insert(p, q);
        }
        let mut srcs = Vec::with_capacity(keep.len());
        let mut feedback = Vec::with_capacity(keep.len());
        for &p in &keep {
            let mut list = Vec::new();
            for &s in &self.srcs[p] {
                match new_pos.get(&s) {
                    Some(&q) => list.push(q),
                    None if matches!(self.layers[p].kind, LayerKind::BridgeDst { .. }) => {}
                    None => {
                        return Err(Error::Partition(format!(
                            "layer `{}` at location {location} reads `{}` at location {} without a bridge",
                            self.layers[p].name, self.layers[s].name, self.layers[s].location
                        )))
                    }
                }
            }
            srcs.push(list);
            feedback.push(match self.feedback[p] {
                None => None,
                Some(f) => Some(*new_pos.get(&f).ok_or_else(|| {
                    Error::Partition(format!("rbm layer `{}` is separated from its partner", self.layers[p].name))
                })?),
            });
        }
        let layers: Vec<Layer> = keep.iter().map(|&p| self.layers[p].clone()).collect();
        let mut params = ParamTable::default();
        let mut specs = BTreeMap::new();
        for l in &layers {
            for name in &l.params {
                if !params.contains(name) {
                    params.insert(self.params.get(name)?.clone());
                    specs.insert(name.clone(), self.specs[name].clone());
                }
            }
        }
        let n = layers.len();
        let mut net = NeuralNet {
            layers,
            srcs,
            feedback,
            needs_backward: keep.iter().map(|&p| self.needs_backward[p]).collect(),
            wants: Vec::new(),
            owned: Vec::new(),
            params,
            specs,
            outputs: vec![None; n],
            grad_in: vec![Vec::new(); n],
            batch: None,
            location: Some(location),
            partition_count: self.partition_count,
            trace: None,
        };
        net.finish();
        Ok(net)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layers in execution order.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Source positions of the layer at `pos`.
    pub fn sources(&self, pos: usize) -> &[usize] {
        &self.srcs[pos]
    }

    /// Location this fragment was cut for, or `None` for a whole net.
    pub fn location(&self) -> Option<usize> {
        self.location
    }

    /// Number of locations the net spans.
    pub fn partition_count(&self) -> usize {
        self.partition_count
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTable {
        &mut self.params
    }

    pub fn param_specs(&self) -> impl Iterator<Item = &ParamSpec> {
        self.specs.values()
    }

    /// Parameters whose Collect and Update happen at the layer at `pos`:
    /// those it is the first layer in execution order to reference.
    pub fn owned_params(&self, pos: usize) -> &[String] {
        &self.owned[pos]
    }

    pub fn needs_backward(&self, pos: usize) -> bool {
        self.needs_backward[pos]
    }

    /// Positions of (visible, hidden) RBM pairs in execution order.
    pub fn rbm_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.layers.len())
            .filter_map(|p| self.feedback[p].map(|h| (p, h)))
            .collect()
    }

    pub fn set_batch(&mut self, batch: Batch) {
        self.batch = Some(batch);
    }

    pub fn batch(&self) -> Option<&Batch> {
        self.batch.as_ref()
    }

    /// Clears outputs, pending gradients and parameter gradients.
    pub fn begin_pass(&mut self) {
        self.outputs.iter_mut().for_each(|o| *o = None);
        self.grad_in.iter_mut().for_each(Vec::clear);
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub(crate) fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub(crate) fn record(&mut self, event: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(event);
        }
    }

    /// Runs `compute_feature` of the layer at `pos`.
    pub fn forward_layer(&mut self, pos: usize, phase: Phase, env: &mut dyn LayerEnv) -> Result<()> {
        if self.tracing() {
            let layer = self.layers[pos].name.clone();
            self.record(TraceEvent::Forward { layer });
        }
        let srcs: Vec<&Blob> = self.srcs[pos]
            .iter()
            .map(|&s| {
                self.outputs[s].as_ref().ok_or_else(|| {
                    Error::sequencing(
                        &self.layers[pos].name,
                        format!("source `{}` is not populated", self.layers[s].name),
                    )
                })
            })
            .collect::<Result<_>>()?;
        let out = self.layers[pos].compute_feature(phase, &srcs, &self.params, self.batch.as_ref(), env)?;
        self.outputs[pos] = Some(out);
        Ok(())
    }

    /// Runs `compute_gradient` of the layer at `pos` if it takes part in
    /// the backward pass, routing source gradients to their producers.
    pub fn backward_layer(&mut self, pos: usize, env: &mut dyn LayerEnv) -> Result<()> {
        if !self.needs_backward[pos] {
            return Ok(());
        }
        if self.tracing() {
            let layer = self.layers[pos].name.clone();
            self.record(TraceEvent::Backward { layer });
        }
        let mut contributions = std::mem::take(&mut self.grad_in[pos]);
        contributions.sort_by(|a, b| a.0.cmp(&b.0));
        let mut grad: Option<Blob> = None;
        for (_, g) in contributions {
            match &mut grad {
                None => grad = Some(g),
                Some(acc) => acc.add_assign(&g)?,
            }
        }
        let data = self.outputs[pos]
            .as_ref()
            .ok_or_else(|| Error::sequencing(&self.layers[pos].name, "forward pass has not run"))?;
        let srcs: Vec<&Blob> = self.srcs[pos]
            .iter()
            .map(|&s| {
                self.outputs[s]
                    .as_ref()
                    .ok_or_else(|| Error::sequencing(&self.layers[pos].name, "source is not populated"))
            })
            .collect::<Result<_>>()?;
        let grads = self.layers[pos].compute_gradient(&srcs, data, grad.as_ref(), &self.wants[pos], &mut self.params, env)?;
        let name = self.layers[pos].name.clone();
        for (k, g) in grads.into_iter().enumerate() {
            if let (Some(g), true) = (g, self.wants[pos].get(k).copied().unwrap_or(false)) {
                let s = self.srcs[pos][k];
                self.grad_in[s].push((name.clone(), g));
            }
        }
        Ok(())
    }

    /// Forward pass over every layer without parameter exchange.
    pub fn forward(&mut self, phase: Phase, env: &mut dyn LayerEnv) -> Result<()> {
        self.begin_pass();
        for pos in 0..self.layers.len() {
            self.forward_layer(pos, phase, env)?;
        }
        Ok(())
    }

    /// Backward pass over every layer in reverse order.
    pub fn backward(&mut self, env: &mut dyn LayerEnv) -> Result<()> {
        for pos in (0..self.layers.len()).rev() {
            self.backward_layer(pos, env)?;
        }
        Ok(())
    }

    /// Reconstructs the visible side of the pair from the hidden sample.
    pub fn rbm_reconstruct(&mut self, vis: usize, hid: usize) -> Result<()> {
        let visible = self.output_at(vis)?;
        let sample = self.layers[hid].rbm_hidden_sample()?.clone();
        let visible = visible.clone();
        self.layers[vis].rbm_reconstruct(&visible, &sample, &self.params)
    }

    /// Runs the hidden side of one negative-phase step of the pair.
    pub fn rbm_negative(&mut self, vis: usize, hid: usize, last_step: bool, env: &mut dyn LayerEnv) -> Result<()> {
        let recon = self.layers[vis].rbm_reconstruction()?.clone();
        self.layers[hid].rbm_negative(&recon, &self.params, last_step, env)
    }

    fn output_at(&self, pos: usize) -> Result<&Blob> {
        self.outputs[pos]
            .as_ref()
            .ok_or_else(|| Error::sequencing(&self.layers[pos].name, "forward pass has not run"))
    }

    pub fn output(&self, name: &str) -> Option<&Blob> {
        self.position(name).and_then(|p| self.outputs[p].as_ref())
    }

    /// Output of an original layer: the layer itself, or its pieces joined
    /// along the partition dimension.
    pub fn assembled_output(&self, base: &str) -> Option<Blob> {
        if let Some(b) = self.output(base) {
            return Some(b.clone());
        }
        let mut pieces: Vec<(usize, Dim, &Blob)> = self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(p, l)| {
                let part = l.part.as_ref().filter(|part| part.base == base)?;
                Some((part.index, part.dim, self.outputs[p].as_ref()?))
            })
            .collect();
        if pieces.is_empty() {
            return None;
        }
        pieces.sort_by_key(|p| p.0);
        let dim = pieces[0].1;
        concat(&pieces.iter().map(|p| p.2.clone()).collect::<Vec<_>>(), dim).ok()
    }

    /// Parameter values keyed by base name, with column pieces joined.
    pub fn assembled_values(&self) -> Result<BTreeMap<String, Blob>> {
        self.assemble(|p| p.value())
    }

    /// Parameter gradients keyed by base name, with column pieces joined.
    pub fn assembled_grads(&self) -> Result<BTreeMap<String, Blob>> {
        self.assemble(|p| p.grad())
    }

    fn assemble(&self, field: impl Fn(&Param) -> &Blob) -> Result<BTreeMap<String, Blob>> {
        let mut groups: BTreeMap<String, Vec<(usize, Blob)>> = BTreeMap::new();
        for p in self.params.iter() {
            let offset = p.spec.origin.as_ref().map_or(0, |o| o.col_offset);
            groups
                .entry(p.spec.base_name().to_string())
                .or_default()
                .push((offset, field(p).clone()));
        }
        groups
            .into_iter()
            .map(|(name, mut pieces)| {
                pieces.sort_by_key(|p| p.0);
                let blobs: Vec<Blob> = pieces.into_iter().map(|p| p.1).collect();
                Ok((name, concat(&blobs, Dim::Cols)?))
            })
            .collect()
    }

    /// Loss totals merged over loss layers, or over RBM visible layers when
    /// the net has no loss layer.
    pub fn loss_stats(&self) -> LossStats {
        let has_loss = self.layers.iter().any(|l| l.kind.is_loss());
        let mut total = LossStats::default();
        for l in &self.layers {
            if l.kind.is_loss() || (!has_loss && matches!(l.kind, LayerKind::RbmVis)) {
                if let Some(s) = l.stats() {
                    total.merge(s);
                }
            }
        }
        total
    }

    /// Sum of the normalized values emitted by the loss layers.
    pub fn loss_value(&self) -> f64 {
        self.layers
            .iter()
            .zip(&self.outputs)
            .filter(|(l, _)| l.kind.is_loss())
            .filter_map(|(_, o)| o.as_ref().map(|b| b.get(0, 0)))
            .sum()
    }
}
