use std::collections::{BTreeMap, BTreeSet};

use super::{LayerDecl, NetConfig};
use crate::error::{Error, Result};
use crate::layers::LayerKind;

fn step_name(name: &str, t: usize) -> String {
    format!("{name}#{t}")
}

/// Expands every recurrent layer (and every layer flagged `unroll`) into
/// `unroll_len` position instances sharing one parameter set. Instance `t` of
/// a recurrent layer takes instance `t-1` as its hidden-state source; the
/// first instance starts from a zero state.
pub fn unroll_recurrent(cfg: &NetConfig) -> Result<NetConfig> {
    let replicated: BTreeSet<&str> = cfg
        .layers
        .iter()
        .filter(|l| l.position.is_none() && (l.kind.is_recurrent() || l.unroll))
        .map(|l| l.name.as_str())
        .collect();
    if replicated.is_empty() {
        return Ok(cfg.clone());
    }
    let len = cfg
        .unroll_len
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::config("unroll_len must be at least 1 when recurrent layers are present"))?;
    check_breakable(cfg)?;

    let mut layers: Vec<LayerDecl> = cfg
        .layers
        .iter()
        .filter(|l| !replicated.contains(l.name.as_str()))
        .map(|l| {
            let mut l = l.clone();
            for s in &mut l.srcs {
                if replicated.contains(s.as_str()) {
                    *s = step_name(s, len - 1);
                }
            }
            l
        })
        .collect();

    for t in 0..len {
        for decl in cfg.layers.iter().filter(|l| replicated.contains(l.name.as_str())) {
            let mut l = decl.clone();
            l.name = step_name(&decl.name, t);
            l.param_prefix = Some(decl.param_prefix().to_string());
            l.position = Some(t);
            l.unroll = false;
            l.srcs = decl
                .srcs
                .iter()
                .filter(|s| *s != &decl.name)
                .map(|s| {
                    if replicated.contains(s.as_str()) {
                        step_name(s, t)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            if decl.kind.is_recurrent() && t > 0 {
                l.srcs.push(step_name(&decl.name, t - 1));
            }
            match &mut l.kind {
                LayerKind::OneHot { column, .. } => *column += t,
                LayerKind::Label { column: Some(c) } => *c += t,
                _ => {}
            }
            layers.push(l);
        }
    }
    Ok(NetConfig {
        layers,
        unroll_len: cfg.unroll_len,
        default_partition_dim: cfg.default_partition_dim,
    })
}

/// Rejects cycles other than a recurrent layer naming itself as a source.
fn check_breakable(cfg: &NetConfig) -> Result<()> {
    let index = cfg.index();
    let edges: BTreeMap<usize, Vec<usize>> = cfg
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let srcs = l
                .srcs
                .iter()
                .filter(|s| !(l.kind.is_recurrent() && *s == &l.name))
                .filter_map(|s| index.get(s.as_str()).copied())
                .collect();
            (i, srcs)
        })
        .collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; cfg.layers.len()];
    fn visit(i: usize, edges: &BTreeMap<usize, Vec<usize>>, state: &mut [u8]) -> bool {
        state[i] = 1;
        for &j in &edges[&i] {
            if state[j] == 1 || (state[j] == 0 && !visit(j, edges, state)) {
                return false;
            }
        }
        state[i] = 2;
        true
    }
    for i in 0..cfg.layers.len() {
        if state[i] == 0 && !visit(i, &edges, &mut state) {
            return Err(Error::config(format!(
                "cycle through `{}` is not a recurrent self-connection and cannot be unrolled",
                cfg.layers[i].name
            )));
        }
    }
    Ok(())
}
