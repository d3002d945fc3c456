use std::collections::{BTreeMap, HashMap, HashSet};

use super::{LayerDecl, NetConfig, PartitionDim};
use crate::error::{Error, Result};
use crate::layers::{LayerKind, PartInfo};
use crate::tensor::Dim;

/// Where the data of an original layer lives after partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Whole(usize),
    Split(Dim),
}

/// What a consumer piece needs from one of its sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Need {
    Full,
    /// The full blob, fanned out to every piece of a feature-split consumer.
    Replicated,
    Piece(Dim, usize),
}

/// Splits layers across `workers` locations and inserts the connection
/// layers that keep data flow type-correct.
///
/// Dimension-0 layers become `workers` sub-layers holding row ranges of the
/// batch with replicated parameters. Dimension-1 layers become sub-layers
/// holding column ranges with column-split parameters. Sub-layer `i` lives
/// at location `i`; a layer with a manual `location` keeps it and stays
/// whole. A default dimension of 1 only applies to kinds that support it.
pub fn partition(cfg: &NetConfig, workers: usize) -> Result<NetConfig> {
    if workers == 0 {
        return Err(Error::Partition("worker count must be at least 1".into()));
    }
    if workers == 1 {
        return Ok(cfg.clone());
    }
    let mut layouts = BTreeMap::new();
    for decl in &cfg.layers {
        layouts.insert(decl.name.clone(), layout_of(cfg, decl, workers)?);
    }
    for decl in &cfg.layers {
        for fb in &decl.feedback {
            if layouts[&decl.name] != layouts[fb] {
                return Err(Error::config(format!(
                    "rbm layers `{}` and `{fb}` must be partitioned identically",
                    decl.name
                )));
            }
        }
    }
    let mut b = Builder::new(workers, layouts);
    for decl in &cfg.layers {
        b.expand(decl)?;
    }
    Ok(NetConfig {
        layers: b.out,
        unroll_len: cfg.unroll_len,
        default_partition_dim: cfg.default_partition_dim,
    })
}

fn layout_of(cfg: &NetConfig, decl: &LayerDecl, workers: usize) -> Result<Layout> {
    if decl.kind.is_connection() || decl.part.is_some() {
        return Err(Error::config(format!(
            "layer `{}` is already a partition artifact; partition the original net",
            decl.name
        )));
    }
    if let Some(loc) = decl.location {
        if loc >= workers {
            return Err(Error::config(format!(
                "layer `{}` has location {loc} but there are only {workers} workers",
                decl.name
            )));
        }
        return Ok(Layout::Whole(loc));
    }
    let explicit = decl.partition_dim.is_some();
    match decl.partition_dim.or(cfg.default_partition_dim).unwrap_or(PartitionDim::None) {
        PartitionDim::None => Ok(Layout::Whole(0)),
        PartitionDim::Dim(Dim::Rows) => Ok(Layout::Split(Dim::Rows)),
        PartitionDim::Dim(Dim::Cols) => {
            if !decl.kind.splittable_on_features() {
                if !explicit {
                    return Ok(Layout::Whole(0));
                }
                let why = if decl.kind.is_loss() {
                    "loss layers need full rows"
                } else {
                    "this kind has no feature dimension to split"
                };
                return Err(Error::config(format!(
                    "layer `{}` ({}) cannot be partitioned on dimension 1: {why}",
                    decl.name,
                    decl.kind.type_name()
                )));
            }
            if let LayerKind::InnerProduct { out } = decl.kind {
                if out < workers {
                    return Err(Error::Partition(format!(
                        "layer `{}` has {out} units, fewer than {workers} workers",
                        decl.name
                    )));
                }
            }
            Ok(Layout::Split(Dim::Cols))
        }
    }
}

fn piece_name(base: &str, i: usize) -> String {
    format!("{base}@{i}")
}

fn connection(name: String, kind: LayerKind, srcs: Vec<String>, loc: usize) -> LayerDecl {
    LayerDecl {
        srcs,
        location: Some(loc),
        ..LayerDecl::new(name, kind, &[])
    }
}

struct Builder {
    workers: usize,
    layouts: BTreeMap<String, Layout>,
    loc: HashMap<String, usize>,
    made: HashSet<String>,
    next_bridge: u32,
    out: Vec<LayerDecl>,
}

impl Builder {
    fn new(workers: usize, layouts: BTreeMap<String, Layout>) -> Self {
        let mut loc = HashMap::new();
        for (name, layout) in &layouts {
            match layout {
                Layout::Whole(l) => {
                    loc.insert(name.clone(), *l);
                }
                Layout::Split(_) => {
                    for i in 0..workers {
                        loc.insert(piece_name(name, i), i);
                    }
                }
            }
        }
        Builder {
            workers,
            layouts,
            loc,
            made: HashSet::new(),
            next_bridge: 0,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, decl: LayerDecl) {
        self.loc.insert(decl.name.clone(), decl.location.unwrap_or(0));
        self.made.insert(decl.name.clone());
        self.out.push(decl);
    }

    fn expand(&mut self, decl: &LayerDecl) -> Result<()> {
        let layout = self.layouts[&decl.name];
        let pieces: Vec<(String, usize, Option<PartInfo>)> = match layout {
            Layout::Whole(l) => vec![(decl.name.clone(), l, None)],
            Layout::Split(dim) => (0..self.workers)
                .map(|i| {
                    let part = PartInfo {
                        base: decl.name.clone(),
                        dim,
                        index: i,
                        parts: self.workers,
                    };
                    (piece_name(&decl.name, i), i, Some(part))
                })
                .collect(),
        };
        for (index, (name, loc, part)) in pieces.into_iter().enumerate() {
            let need = match layout {
                Layout::Whole(_) => Need::Full,
                Layout::Split(Dim::Rows) => Need::Piece(Dim::Rows, index),
                Layout::Split(Dim::Cols) if matches!(decl.kind, LayerKind::InnerProduct { .. }) => Need::Replicated,
                Layout::Split(Dim::Cols) => Need::Piece(Dim::Cols, index),
            };
            let mut srcs = Vec::with_capacity(decl.srcs.len());
            for s in &decl.srcs {
                let node = self.provide(s, need);
                srcs.push(self.bridge(&node, loc));
            }
            let feedback = decl
                .feedback
                .iter()
                .map(|f| match self.layouts[f] {
                    Layout::Whole(_) => f.clone(),
                    Layout::Split(_) => piece_name(f, index),
                })
                .collect();
            let param_prefix = match layout {
                Layout::Whole(_) => decl.param_prefix.clone(),
                Layout::Split(_) => Some(decl.param_prefix().to_string()),
            };
            self.emit(LayerDecl {
                name,
                srcs,
                feedback,
                param_prefix,
                location: Some(loc),
                partition_dim: None,
                part,
                ..decl.clone()
            });
        }
        Ok(())
    }

    /// Returns the node holding what `need` asks of source `s`, at whatever
    /// location that node lives.
    fn provide(&mut self, s: &str, need: Need) -> String {
        let layout = self.layouts[s];
        match (layout, need) {
            (Layout::Whole(_), Need::Full) => s.to_string(),
            (Layout::Whole(_), Need::Replicated) => self.split_of(s),
            (Layout::Whole(_), Need::Piece(d, i)) => self.slice_of(s, d, i),
            (Layout::Split(d0), Need::Piece(d, i)) if d0 == d => piece_name(s, i),
            (Layout::Split(d0), Need::Full) => self.gather(s, d0),
            (Layout::Split(d0), Need::Replicated) => {
                let g = self.gather(s, d0);
                self.split_of(&g)
            }
            (Layout::Split(d0), Need::Piece(d, i)) => {
                let g = self.gather(s, d0);
                self.slice_of(&g, d, i)
            }
        }
    }

    fn gather(&mut self, s: &str, dim: Dim) -> String {
        let name = format!("{s}/concat");
        if !self.made.contains(&name) {
            let srcs = (0..self.workers).map(|j| self.bridge(&piece_name(s, j), 0)).collect();
            self.emit(connection(name.clone(), LayerKind::Concat { dim }, srcs, 0));
        }
        name
    }

    fn slice_of(&mut self, node: &str, dim: Dim, index: usize) -> String {
        let name = format!("{node}/slice{dim}@{index}");
        if !self.made.contains(&name) {
            let kind = LayerKind::Slice {
                dim,
                parts: self.workers,
                index,
            };
            let loc = self.loc[node];
            self.emit(connection(name.clone(), kind, vec![node.to_string()], loc));
        }
        name
    }

    fn split_of(&mut self, node: &str) -> String {
        let name = format!("{node}/split");
        if !self.made.contains(&name) {
            let loc = self.loc[node];
            self.emit(connection(name.clone(), LayerKind::Split, vec![node.to_string()], loc));
        }
        name
    }

    /// Routes `node` to location `to` through a bridge pair when needed.
    fn bridge(&mut self, node: &str, to: usize) -> String {
        let from = self.loc[node];
        if from == to {
            return node.to_string();
        }
        let send = format!("{node}/send{to}");
        let recv = format!("{node}/recv{to}");
        if !self.made.contains(&recv) {
            let id = self.next_bridge;
            self.next_bridge += 1;
            self.emit(connection(send.clone(), LayerKind::BridgeSrc { id }, vec![node.to_string()], from));
            self.emit(connection(recv.clone(), LayerKind::BridgeDst { id }, vec![send], to));
        }
        recv
    }
}
