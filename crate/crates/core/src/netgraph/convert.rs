use super::NetConfig;
use crate::error::{Error, Result};
use crate::layers::LayerKind;

/// Replaces every undirected (RBM) connection with two directed edges:
/// visible → hidden as an ordinary source edge, hidden → visible as a
/// feedback edge. The visible layer then shares the hidden layer's weights.
pub fn convert_undirected(cfg: &NetConfig) -> Result<NetConfig> {
    let mut out = cfg.clone();
    let pairs: Vec<(String, String)> = cfg
        .layers
        .iter()
        .flat_map(|l| l.undirected.iter().map(move |u| (l.name.clone(), u.clone())))
        .collect();
    for (a, b) in pairs {
        let ka = &cfg
            .layer(&a)
            .ok_or_else(|| Error::config(format!("unknown layer `{a}`")))?
            .kind;
        let kb = &cfg
            .layer(&b)
            .ok_or_else(|| Error::config(format!("undirected edge to unknown layer `{b}`")))?
            .kind;
        let (vis, hid) = match (ka, kb) {
            (LayerKind::RbmVis, LayerKind::RbmHid { .. }) => (a, b),
            (LayerKind::RbmHid { .. }, LayerKind::RbmVis) => (b, a),
            _ => {
                return Err(Error::config(format!(
                    "undirected edge between `{a}` and `{b}` must join an rbm_vis and an rbm_hid layer, got {} and {}",
                    ka.type_name(),
                    kb.type_name()
                )))
            }
        };
        let h = out.layer_mut(&hid).expect("validated above");
        if !h.srcs.contains(&vis) {
            h.srcs.push(vis.clone());
        }
        let v = out.layer_mut(&vis).expect("validated above");
        if !v.feedback.contains(&hid) {
            v.feedback.push(hid.clone());
        }
    }
    for l in &mut out.layers {
        l.undirected.clear();
    }
    for l in &out.layers {
        if matches!(l.kind, LayerKind::RbmVis) && l.feedback.len() > 1 {
            return Err(Error::config(format!(
                "visible layer `{}` is connected to more than one hidden layer",
                l.name
            )));
        }
    }
    Ok(out)
}
