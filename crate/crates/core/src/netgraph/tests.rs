use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::layers::{Batch, Phase};
use crate::presets;
use crate::rng::UnitRng;
use crate::tensor::Blob;
use crate::training::LocalContext;

fn build(cfg: &NetConfig, workers: usize, batch: usize) -> NeuralNet {
    NeuralNet::build(&cfg.pipeline(workers).unwrap(), BuildOptions { batch, seed: 5 }).unwrap()
}

fn random_batch(rows: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    use rand::Rng;
    let mut rng = UnitRng::new(seed);
    let features = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes) as f64).collect();
    Batch {
        features: Blob::from_vec(rows, dim, features).unwrap(),
        labels: Blob::from_vec(rows, 1, labels).unwrap(),
    }
}

fn max_diff(a: &Blob, b: &Blob) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn names(cfg: &NetConfig) -> Vec<&str> {
    cfg.layers.iter().map(|l| l.name.as_str()).collect()
}

fn srcs_of<'a>(cfg: &'a NetConfig, name: &str) -> Vec<&'a str> {
    cfg.layer(name).unwrap().srcs.iter().map(String::as_str).collect()
}

#[test]
fn feedforward_net_runs_in_declaration_order() {
    let net = build(&presets::mlp(4, &[3], 2), 1, 2);
    assert_eq!(net.layer_names(), ["data", "label", "h1", "a1", "out", "loss"]);
    let hidden_first = NetConfig::new(vec![
        LayerDecl::new("loss", LayerKind::EuclideanLoss, &["hidden", "input"]),
        LayerDecl::new("hidden", LayerKind::InnerProduct { out: 3 }, &["input"]),
        LayerDecl::new("input", LayerKind::Input { dim: 3 }, &[]),
    ]);
    let net = build(&hidden_first, 1, 2);
    assert_eq!(net.layer_names(), ["input", "hidden", "loss"]);
}

#[test]
fn cycle_is_reported_with_its_layers() {
    let cfg = NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: 2 }, &[]),
        LayerDecl::new("a", LayerKind::InnerProduct { out: 2 }, &["b"]),
        LayerDecl::new("b", LayerKind::Sigmoid, &["a"]),
    ]);
    let err = NeuralNet::build(&cfg, BuildOptions { batch: 1, seed: 0 }).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("cycle detected"), "{msg}");
    assert!(msg.contains('a') && msg.contains('b'), "{msg}");
}

#[test]
fn validation_names_the_offending_field() {
    let cfg = NetConfig::new(vec![LayerDecl::new("h", LayerKind::Sigmoid, &["missing"])]);
    match cfg.validate().unwrap_err() {
        Error::Validation { path, .. } => assert!(path.contains("srcs"), "{path}"),
        other => panic!("unexpected {other:?}"),
    }
    let dup = NetConfig::new(vec![
        LayerDecl::new("x", LayerKind::Input { dim: 1 }, &[]),
        LayerDecl::new("x", LayerKind::Input { dim: 1 }, &[]),
    ]);
    assert!(matches!(dup.validate(), Err(Error::Validation { .. })));
}

fn rbm_stack() -> NetConfig {
    NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: 6 }, &[]),
        LayerDecl::new("vis1", LayerKind::RbmVis, &["data"]),
        LayerDecl::new("hid1", LayerKind::RbmHid { hidden: 4 }, &[]).with_undirected("vis1"),
        LayerDecl::new("vis2", LayerKind::RbmVis, &["hid1"]),
        LayerDecl::new("hid2", LayerKind::RbmHid { hidden: 3 }, &[]).with_undirected("vis2"),
    ])
}

#[test]
fn undirected_edges_become_two_directed_edges_each() {
    let cfg = convert_undirected(&rbm_stack()).unwrap();
    let pairs = [("vis1", "hid1"), ("vis2", "hid2")];
    let mut directed = 0;
    for l in &cfg.layers {
        assert!(l.undirected.is_empty());
        for other in l.srcs.iter().chain(&l.feedback) {
            if pairs.iter().any(|&(v, h)| (v, h) == (other, &l.name) || (h, v) == (other, &l.name)) {
                directed += 1;
            }
        }
    }
    assert_eq!(directed, 4);
    assert_eq!(srcs_of(&cfg, "hid1"), ["vis1"]);
    assert_eq!(cfg.layer("vis1").unwrap().feedback, ["hid1"]);

    let net = build(&rbm_stack(), 1, 2);
    assert_eq!(net.rbm_pairs().len(), 2);
    for (vis, hid) in [("vis1", "hid1"), ("vis2", "hid2")] {
        let w = format!("{hid}/W");
        assert!(net.layer(vis).unwrap().params.contains(&w), "{vis} shares {w}");
        assert!(net.layer(hid).unwrap().params.contains(&w));
    }
}

#[test]
fn conversion_leaves_directed_nets_alone_and_rejects_non_rbm_pairs() {
    let mlp = presets::mlp(3, &[2], 2);
    assert_eq!(convert_undirected(&mlp).unwrap(), mlp);
    let bad = NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: 2 }, &[]),
        LayerDecl::new("h", LayerKind::InnerProduct { out: 2 }, &["data"]).with_undirected("data"),
    ]);
    assert!(matches!(convert_undirected(&bad), Err(Error::Config(_))));
}

#[test]
fn unrolling_chains_cells_that_share_parameters() {
    let cfg = unroll_recurrent(&presets::char_rnn(5, 4, 4)).unwrap();
    let cells: Vec<&str> = cfg
        .layers
        .iter()
        .filter(|l| l.kind.is_recurrent())
        .map(|l| l.name.as_str())
        .collect();
    assert_eq!(cells, ["rnn#0", "rnn#1", "rnn#2", "rnn#3"]);
    assert_eq!(srcs_of(&cfg, "rnn#0"), ["onehot#0"]);
    for t in 1..4 {
        assert_eq!(srcs_of(&cfg, &format!("rnn#{t}")), [format!("onehot#{t}"), format!("rnn#{}", t - 1)]);
        assert_eq!(srcs_of(&cfg, &format!("loss#{t}")), [format!("out#{t}"), format!("next#{t}")]);
    }
    assert_eq!(cfg.layer("onehot#2").unwrap().kind, LayerKind::OneHot { vocab: 5, column: 2 });
    assert_eq!(cfg.layer("next#2").unwrap().kind, LayerKind::Label { column: Some(3) });

    let net = build(&presets::char_rnn(5, 4, 4), 1, 2);
    let first = &net.layer("rnn#0").unwrap().params;
    for t in 1..4 {
        assert_eq!(&net.layer(&format!("rnn#{t}")).unwrap().params, first);
    }
    let out_params: BTreeSet<&str> = net.params().names().filter(|n| n.starts_with("out")).collect();
    assert_eq!(out_params, BTreeSet::from(["out/W", "out/b"]));
}

#[test]
fn unroll_of_one_is_a_single_cell_and_stacks_multiply() {
    let cfg = unroll_recurrent(&presets::char_rnn(3, 2, 1)).unwrap();
    assert_eq!(srcs_of(&cfg, "rnn#0"), ["onehot#0"]);
    assert_eq!(cfg.layers.iter().filter(|l| l.kind.is_recurrent()).count(), 1);

    let mut stacked = presets::char_rnn(3, 2, 3);
    stacked
        .layers
        .insert(4, LayerDecl::new("rnn2", LayerKind::Recurrent { hidden: 2 }, &["rnn"]));
    stacked.layer_mut("out").unwrap().srcs = vec!["rnn2".into()];
    let cfg = unroll_recurrent(&stacked).unwrap();
    assert_eq!(cfg.layers.iter().filter(|l| l.kind.is_recurrent()).count(), 6);
    assert_eq!(srcs_of(&cfg, "rnn2#2"), ["rnn#2", "rnn2#1"]);
}

#[test]
fn non_recurrent_cycles_cannot_be_unrolled() {
    let mut cfg = NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: 2 }, &[]),
        LayerDecl::new("r", LayerKind::Recurrent { hidden: 2 }, &["data", "b"]),
        LayerDecl::new("b", LayerKind::Sigmoid, &["r"]),
    ]);
    cfg.unroll_len = Some(3);
    assert!(unroll_recurrent(&cfg).is_err());
}

#[test]
fn pipeline_stages_are_idempotent() {
    for cfg in [presets::mlp(4, &[3], 2), rbm_stack(), presets::char_rnn(4, 3, 3)] {
        let c = convert_undirected(&cfg).unwrap();
        assert_eq!(convert_undirected(&c).unwrap(), c);
        let u = unroll_recurrent(&c).unwrap();
        assert_eq!(unroll_recurrent(&u).unwrap(), u);
    }
}

#[test]
fn feature_partition_of_mlp_inserts_expected_connections() {
    let cfg = partition(&presets::mlp(4, &[6], 3).with_default_dim(Dim::Cols), 2).unwrap();
    assert_eq!(
        names(&cfg),
        [
            "data",
            "label",
            "data/split",
            "h1@0",
            "data/split/send1",
            "data/split/recv1",
            "h1@1",
            "a1@0",
            "a1@1",
            "a1@1/send0",
            "a1@1/recv0",
            "a1/concat",
            "a1/concat/split",
            "out@0",
            "a1/concat/split/send1",
            "a1/concat/split/recv1",
            "out@1",
            "out@1/send0",
            "out@1/recv0",
            "out/concat",
            "loss",
        ]
    );
    assert_eq!(srcs_of(&cfg, "h1@1"), ["data/split/recv1"]);
    assert_eq!(srcs_of(&cfg, "a1@1"), ["h1@1"]);
    assert_eq!(srcs_of(&cfg, "a1/concat"), ["a1@0", "a1@1/recv0"]);
    assert_eq!(srcs_of(&cfg, "loss"), ["out/concat", "label"]);
    let bridges = cfg.layers.iter().filter(|l| matches!(l.kind, LayerKind::BridgeSrc { .. })).count();
    assert_eq!(bridges, 4);
    let connections = cfg.layers.iter().filter(|l| l.kind.is_connection()).count();
    assert_eq!(connections, 12);
    for l in &cfg.layers {
        assert!(l.location.is_some(), "{} has no location", l.name);
    }
}

#[test]
fn feature_split_halves_units_and_weights() {
    let mlp = presets::mlp(784, &[50], 10).with_default_dim(Dim::Cols);
    let net = build(&mlp, 2, 4);
    for i in 0..2 {
        assert_eq!(net.params().value(&format!("h1@{i}/W")).unwrap().shape(), (784, 25));
        assert_eq!(net.params().value(&format!("h1@{i}/b")).unwrap().shape(), (1, 25));
    }
    assert!(!net.params().contains("h1/W"));
    let full = net.assembled_values().unwrap();
    assert_eq!(full["h1/W"].shape(), (784, 50));
}

#[test]
fn batch_split_halves_rows_and_replicates_parameters() {
    let mlp = presets::mlp(8, &[5], 3).with_default_dim(Dim::Rows);
    let mut net = build(&mlp, 2, 256);
    net.set_batch(random_batch(256, 8, 3, 1));
    net.forward(Phase::Train, &mut LocalContext::new(1)).unwrap();
    for i in 0..2 {
        assert_eq!(net.output(&format!("h1@{i}")).unwrap().shape(), (128, 5));
        assert_eq!(net.layer(&format!("h1@{i}")).unwrap().params, ["h1/W", "h1/b"]);
    }
}

#[test]
fn partition_rejects_impossible_requests() {
    let mut cfg = presets::mlp(4, &[3], 2);
    cfg.layer_mut("loss").unwrap().partition_dim = Some(PartitionDim::Dim(Dim::Cols));
    let msg = partition(&cfg, 2).unwrap_err().to_string();
    assert!(msg.contains("loss layers need full rows"), "{msg}");

    let narrow = presets::mlp(4, &[3], 2).with_default_dim(Dim::Cols);
    assert!(matches!(partition(&narrow, 4), Err(Error::Partition(_))));
    assert!(matches!(partition(&narrow, 0), Err(Error::Partition(_))));

    let mut misplaced = presets::mlp(4, &[3], 2);
    misplaced.layer_mut("h1").unwrap().location = Some(2);
    assert!(partition(&misplaced, 2).is_err());
}

#[test]
fn single_worker_partition_is_identity() {
    let cfg = presets::mlp(4, &[3], 2).with_default_dim(Dim::Cols);
    assert_eq!(partition(&cfg, 1).unwrap(), cfg);
}

#[test]
fn manual_location_keeps_a_layer_whole() {
    let mut cfg = presets::mlp(4, &[6], 2).with_default_dim(Dim::Rows);
    cfg.layer_mut("h1").unwrap().location = Some(1);
    let p = partition(&cfg, 2).unwrap();
    let h1 = p.layer("h1").unwrap();
    assert_eq!(h1.location, Some(1));
    assert!(p.layer("h1@0").is_none());
}

#[test]
fn fragments_order_sends_early_and_receives_late() {
    let mlp = presets::mlp(4, &[6], 3).with_default_dim(Dim::Cols);
    let net = build(&mlp, 2, 2);
    assert_eq!(
        net.fragment(0).unwrap().layer_names(),
        [
            "data",
            "label",
            "data/split",
            "data/split/send1",
            "h1@0",
            "a1@0",
            "a1@1/recv0",
            "a1/concat",
            "a1/concat/split",
            "a1/concat/split/send1",
            "out@0",
            "out@1/recv0",
            "out/concat",
            "loss",
        ]
    );
    assert_eq!(
        net.fragment(1).unwrap().layer_names(),
        [
            "data/split/recv1",
            "h1@1",
            "a1@1",
            "a1@1/send0",
            "a1/concat/split/recv1",
            "out@1",
            "out@1/send0",
        ]
    );
    let total: usize = (0..2).map(|l| net.fragment(l).unwrap().len()).sum();
    assert_eq!(total, net.len());
}

fn assert_transparent(cfg: &NetConfig, workers: usize, batch: &Batch) {
    let run = |k: usize| {
        let mut net = build(cfg, k, batch.features.rows());
        net.set_batch(batch.clone());
        let mut ctx = LocalContext::new(3);
        net.forward(Phase::Train, &mut ctx).unwrap();
        net.backward(&mut ctx).unwrap();
        let outs: Vec<Blob> = ["h1", "a1", "out"].iter().map(|n| net.assembled_output(n).unwrap()).collect();
        (net.loss_value(), outs, net.assembled_grads().unwrap())
    };
    let (loss1, outs1, grads1) = run(1);
    let (loss_k, outs_k, grads_k) = run(workers);
    assert!((loss1 - loss_k).abs() <= 1e-10, "loss {loss1} vs {loss_k}");
    for (a, b) in outs1.iter().zip(&outs_k) {
        assert!(max_diff(a, b) <= 1e-10);
    }
    assert_eq!(grads1.keys().collect::<Vec<_>>(), grads_k.keys().collect::<Vec<_>>());
    for (name, g) in &grads1 {
        assert!(max_diff(g, &grads_k[name]) <= 1e-10, "gradient of {name}");
    }
}

trait WithDefaultDim {
    fn with_default_dim(self, dim: Dim) -> Self;
}

impl WithDefaultDim for NetConfig {
    fn with_default_dim(mut self, dim: Dim) -> Self {
        self.default_partition_dim = Some(PartitionDim::Dim(dim));
        self
    }
}

#[derive(Debug, Clone, Copy)]
enum Scheme {
    Rows,
    Cols,
    Hybrid,
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn execution_order_is_topological(
        n in 1usize..14,
        edges in prop::collection::vec((0usize..14, 0usize..14), 0..40),
        classes in prop::collection::vec(0u8..3, 14),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        // Random DAG over a shuffled labelling: edges go from lower to higher rank.
        let mut rank: Vec<usize> = (0..n).collect();
        rank.shuffle(&mut UnitRng::new(perm_seed));
        let mut srcs = vec![Vec::new(); n];
        for (a, b) in edges {
            let (a, b) = (a % n, b % n);
            if rank[a] < rank[b] && !srcs[b].contains(&a) {
                srcs[b].push(a);
            }
        }
        let classes: Vec<OrderClass> = classes[..n]
            .iter()
            .map(|c| [OrderClass::Send, OrderClass::Compute, OrderClass::Receive][*c as usize])
            .collect();
        let order = execution_order(&classes, &srcs).unwrap();
        let mut at = vec![usize::MAX; n];
        for (p, &i) in order.iter().enumerate() {
            at[i] = p;
        }
        prop_assert!(at.iter().all(|&p| p < n));
        for (i, list) in srcs.iter().enumerate() {
            for &s in list {
                prop_assert!(at[s] < at[i]);
            }
        }
        // A back edge from the last node to the first closes a cycle when they are connected.
        if let Some((i, list)) = srcs.iter().enumerate().find(|(_, l)| !l.is_empty()) {
            let s = list[0];
            let mut cyclic = srcs.clone();
            cyclic[s].push(i);
            let cycle = execution_order(&classes, &cyclic).unwrap_err();
            prop_assert!(cycle.len() >= 2);
            for w in 0..cycle.len() {
                let (from, to) = (cycle[w], cycle[(w + 1) % cycle.len()]);
                prop_assert!(cyclic[to].contains(&from));
            }
        }
    }

    #[test]
    fn partitioning_is_transparent(
        workers in prop::sample::select(vec![1usize, 2, 4]),
        scheme in prop::sample::select(vec![Scheme::Rows, Scheme::Cols, Scheme::Hybrid]),
        seed in any::<u64>(),
    ) {
        let mut cfg = presets::mlp(5, &[8], 4);
        match scheme {
            Scheme::Rows => cfg = cfg.with_default_dim(Dim::Rows),
            Scheme::Cols => cfg = cfg.with_default_dim(Dim::Cols),
            Scheme::Hybrid => {
                cfg = cfg.with_default_dim(Dim::Rows);
                for name in ["out"] {
                    cfg.layer_mut(name).unwrap().partition_dim = Some(PartitionDim::Dim(Dim::Cols));
                }
            }
        }
        assert_transparent(&cfg, workers, &random_batch(8, 5, 4, seed));
    }
}
