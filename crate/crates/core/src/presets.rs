//! Ready-made net configurations used by examples, tests and the CLI.

use crate::layers::LayerKind;
use crate::netgraph::{LayerDecl, NetConfig};

/// Softmax classifier with sigmoid hidden layers: `data → h1 → a1 → … → out → loss`.
pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> NetConfig {
    let mut layers = vec![
        LayerDecl::new("data", LayerKind::Input { dim: input }, &[]),
        LayerDecl::new("label", LayerKind::Label { column: None }, &[]),
    ];
    let mut prev = "data".to_string();
    for (i, &h) in hidden.iter().enumerate() {
        let ip = format!("h{}", i + 1);
        let act = format!("a{}", i + 1);
        layers.push(LayerDecl::new(ip.clone(), LayerKind::InnerProduct { out: h }, &[&prev]));
        layers.push(LayerDecl::new(act.clone(), LayerKind::Sigmoid, &[&ip]));
        prev = act;
    }
    layers.push(LayerDecl::new("out", LayerKind::InnerProduct { out: classes }, &[&prev]));
    layers.push(LayerDecl::new("loss", LayerKind::SoftmaxLoss, &["out", "label"]));
    NetConfig::new(layers)
}

/// One Bernoulli RBM over the input: `data → vis ⟷ hid`.
pub fn rbm(visible: usize, hidden: usize) -> NetConfig {
    NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: visible }, &[]),
        LayerDecl::new("vis", LayerKind::RbmVis, &["data"]),
        LayerDecl::new("hid", LayerKind::RbmHid { hidden }, &[]).with_undirected("vis"),
    ])
}

/// Character model over windows of `unroll_len + 1` symbol ids: position
/// `t` reads symbol `t` and predicts symbol `t + 1`.
pub fn char_rnn(vocab: usize, hidden: usize, unroll_len: usize) -> NetConfig {
    let mut cfg = NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: unroll_len + 1 }, &[]),
        LayerDecl::new("onehot", LayerKind::OneHot { vocab, column: 0 }, &["data"]).unrolled(),
        LayerDecl::new("next", LayerKind::Label { column: Some(1) }, &["data"]).unrolled(),
        LayerDecl::new("rnn", LayerKind::Recurrent { hidden }, &["onehot"]),
        LayerDecl::new("out", LayerKind::InnerProduct { out: vocab }, &["rnn"]).unrolled(),
        LayerDecl::new("loss", LayerKind::SoftmaxLoss, &["out", "next"]).unrolled(),
    ]);
    cfg.unroll_len = Some(unroll_len);
    cfg
}
